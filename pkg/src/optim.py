"""AdamW with decoupled weight decay and a step-decay learning-rate schedule."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DimensionError
from .tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
):
    """In-place AdamW update with bias-corrected moments."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}/{v.shape}")

    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p *= 1 - lr * weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def step_lr(epoch: int, lr0: float, step_size: int, gamma: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * gamma ** (epoch // step_size)


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Parameter]
    lr: float
    scheduled: bool = False
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like([p.data for p in self.params.values()])


class AdamW:
    """Named parameter groups sharing one set of AdamW hyperparameters."""

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.groups = {g.name: g for g in groups}
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self):
        for g in self.groups.values():
            for p in g.params.values():
                p.grad = None

    def step(self, lrs: dict[str, float]):
        for name, group in self.groups.items():
            if not group.params:
                continue
            params = list(group.params.values())
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            adamw_step(
                [p.data for p in params],
                grads,
                group.state,
                lrs[name],
                self.betas,
                self.eps,
                self.weight_decay,
            )

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for gname, group in self.groups.items():
            for (pname, _), m, v in zip(group.params.items(), group.state.m, group.state.v):
                out[f"optim/{gname}/m/{pname}"] = m
                out[f"optim/{gname}/v/{pname}"] = v
        return out

    def steps(self) -> dict[str, int]:
        return {name: g.state.step for name, g in self.groups.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], steps: dict[str, int]):
        for gname, group in self.groups.items():
            for i, pname in enumerate(group.params):
                try:
                    m = arrays[f"optim/{gname}/m/{pname}"]
                    v = arrays[f"optim/{gname}/v/{pname}"]
                except KeyError:
                    raise CheckpointError(f"optimizer state for {gname}/{pname} missing") from None
                group.state.m[i] = np.array(m, dtype=group.state.m[i].dtype)
                group.state.v[i] = np.array(v, dtype=group.state.v[i].dtype)
            group.state.step = int(steps.get(gname, 0))
