"""Parameter containers and the standard layers built on the primitive ops."""

from typing import Iterator

import numpy as np

from ..errors import CheckpointError
from . import ops
from .core import DEFAULT_DTYPE, Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in list(self._buffers):
            self._buffers[name] = self._buffers[name].astype(dtype)
        for _, child in self.named_children():
            child._cast_buffers(dtype)

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        """Flat ``param/<name>`` and ``buffer/<name>`` array table."""
        state = {f"param/{name}": p.data for name, p in self.named_parameters()}
        state.update({f"buffer/{name}": b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        """Copy stored arrays into this module; names and shapes must match exactly."""
        params = {k[len("param/"):]: v for k, v in state.items() if k.startswith("param/")}
        buffers = {k[len("buffer/"):]: v for k, v in state.items() if k.startswith("buffer/")}
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(params))
        unexpected = sorted(set(params) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if params[name].shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {params[name].shape} != {p.shape}")
            p.data = np.array(params[name], dtype=p.dtype)
        self._load_buffers("", buffers)

    def _load_buffers(self, prefix: str, buffers: dict[str, np.ndarray]):
        for name in self._buffers:
            key = prefix + name
            if key not in buffers:
                raise CheckpointError(f"buffer {key} missing from checkpoint")
            self._buffers[name] = np.array(buffers[key], dtype=self._buffers[name].dtype)
        for name, child in self.named_children():
            child._load_buffers(f"{prefix}{name}.", buffers)


class ModuleDict(Module):
    """String-keyed children, addressed as ``<attr>.<key>`` in parameter names."""

    def __init__(self, modules: dict[str, Module] | None = None):
        super().__init__()
        self._modules: dict[str, Module] = {}
        for key, module in (modules or {}).items():
            self[key] = module

    def __setitem__(self, key, module: Module):
        self._modules[str(key)] = module

    def __getitem__(self, key) -> Module:
        return self._modules[str(key)]

    def __contains__(self, key) -> bool:
        return str(key) in self._modules

    def __iter__(self):
        return iter(self._modules)

    def __len__(self):
        return len(self._modules)

    def items(self):
        return self._modules.items()

    def values(self):
        return self._modules.values()

    def named_children(self):
        yield from self._modules.items()

    def named_parameters(self, prefix: str = ""):
        for key, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{key}.")


class ModuleList(ModuleDict):
    def __init__(self, modules: list[Module] | None = None):
        super().__init__({str(i): m for i, m in enumerate(modules or [])})

    def __iter__(self):
        return iter(self._modules.values())

    def __getitem__(self, index: int) -> Module:
        return self._modules[str(index)]


# ============================================================================
# Layers
# ============================================================================
class Linear(Module):
    """``y = x W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_dim), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 2, stride: int = 2, dtype=DEFAULT_DTYPE):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), dtype=dtype)
        self.bias = Parameter(np.zeros(out_channels), dtype=dtype)
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = ops.NORM_EPS, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(np.ones(channels), dtype=dtype)
        self.bias = Parameter(np.zeros(channels), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x,
            self.weight,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = ops.NORM_EPS, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, std, (count, dim)), dtype=dtype)

    def forward(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(ids, self.weight)
