"""Finite-difference verification of analytic gradients.

The numeric reference is always taken in float64 with central differences;
analytic gradients are then compared at float64 and, after casting the same
module down, at float32.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ComputationRecord, Tensor, no_grad
from .nn import Module, Parameter

logger = logging.getLogger(__name__)

LossFn = Callable[[type], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def sample_coordinates(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in np.sort(flat)]


def numeric_gradient(
    loss_fn: Callable[[], Tensor],
    param: Parameter,
    coords: list[tuple[int, ...]],
    step: float = 1e-5,
) -> np.ndarray:
    out = np.zeros(len(coords))
    with no_grad():
        for i, c in enumerate(coords):
            orig = param.data[c]
            param.data[c] = orig + step
            plus = loss_fn().item()
            param.data[c] = orig - step
            minus = loss_fn().item()
            param.data[c] = orig
            out[i] = (plus - minus) / (2 * step)
    return out


def analytic_gradients(loss_fn: Callable[[], Tensor], module: Module) -> dict[str, np.ndarray]:
    module.zero_grad()
    with ComputationRecord() as record:
        loss = loss_fn()
        record.backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in module.named_parameters()
    }


@dataclass
class GroupResult:
    group: str
    tensors: int = 0
    coordinates: int = 0
    error_f64: float = 0.0
    error_f32: float = 0.0
    worst_tensor: str = ""
    worst_tensor_error: float = 0.0
    _num: list = field(default_factory=list, repr=False)
    _a64: list = field(default_factory=list, repr=False)
    _a32: list = field(default_factory=list, repr=False)

    def passed(self, tol_f32: float, tol_f64: float) -> bool:
        return self.error_f32 < tol_f32 and self.error_f64 < tol_f64


def check_module(
    module: Module,
    loss_fn: LossFn,
    group_of: Callable[[str], str],
    rng: np.random.Generator,
    coords_per_tensor: int = 2,
    step: float = 1e-5,
) -> dict[str, GroupResult]:
    """Compare analytic and numeric gradients for every parameter tensor of ``module``.

    ``loss_fn(dtype)`` must rebuild the scalar loss from scratch with inputs cast
    to ``dtype``. Errors are aggregated per group over all sampled coordinates.
    The module is left in float32.
    """
    module.astype(np.float64)
    params = dict(module.named_parameters())
    coords = {name: sample_coordinates(p.shape, coords_per_tensor, rng) for name, p in params.items()}

    def loss64():
        return loss_fn(np.float64)

    def loss32():
        return loss_fn(np.float32)

    numeric = {}
    for name, p in params.items():
        numeric[name] = numeric_gradient(loss64, p, coords[name], step)
    logger.debug("numeric sweep done over %d tensors", len(params))

    grads64 = analytic_gradients(loss64, module)
    module.astype(np.float32)
    grads32 = analytic_gradients(loss32, module)

    results: dict[str, GroupResult] = {}
    for name in params:
        idx = tuple(np.array(coords[name]).T)
        a64 = grads64[name][idx]
        a32 = grads32[name][idx]
        res = results.setdefault(group_of(name), GroupResult(group_of(name)))
        res.tensors += 1
        res.coordinates += len(coords[name])
        res._num.append(numeric[name])
        res._a64.append(a64)
        res._a32.append(a32)
        err = relative_error(a32, numeric[name])
        if err >= res.worst_tensor_error:
            res.worst_tensor, res.worst_tensor_error = name, err

    for res in results.values():
        num = np.concatenate(res._num)
        res.error_f64 = relative_error(np.concatenate(res._a64), num)
        res.error_f32 = relative_error(np.concatenate(res._a32), num)
    return results
