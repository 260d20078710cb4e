"""Dense tensors with reverse-mode gradient propagation.

Every primitive op appends an :class:`OpNode` to the active
:class:`ComputationRecord`. ``backward`` replays the record in reverse
execution order, which is a valid reverse topological order because an op
can only consume tensors that already exist.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError, NumericError, StaleRecordError
from ..settings import settings

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _state():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = ComputationRecord()
        _local.grad_enabled = True
    return _local


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._record: ComputationRecord | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._record = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # Operator sugar; the op functions do the shape checking
    def __add__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.shift(self, other)
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.shift(self, -other)
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.shift(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __truediv__(self, other):
        from . import ops

        if not isinstance(other, (int, float)):
            raise TypeError("only division by a scalar is supported")
        return ops.scale(self, 1.0 / other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


@dataclass
class OpNode:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ComputationRecord:
    """Ordered log of executed ops, confined to the thread that created it."""

    def __init__(self):
        self.nodes: list[OpNode] = []
        self.consumed = False
        self._owner = threading.get_ident()

    def __enter__(self):
        _state().stack.append(self)
        return self

    def __exit__(self, *exc):
        _state().stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def append(self, node: OpNode):
        if self.consumed:
            raise StaleRecordError(
                "record was already used for backward; call reset() or open a new record"
            )
        if threading.get_ident() != self._owner:
            raise StaleRecordError("a computation record cannot be shared across threads")
        self.nodes.append(node)

    def reset(self):
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._record is not self:
            raise StaleRecordError("loss was not produced under this record")
        if self.consumed:
            raise StaleRecordError("backward was already called on this record")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.adjoint(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(
                        f"{node.name}: adjoint shape {gi.shape} does not match input {t.shape}"
                    )
                gi = gi.astype(t.dtype, copy=False)
                if t.is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                elif id(t) in pending:
                    pending[id(t)] = pending[id(t)] + gi
                else:
                    pending[id(t)] = gi

        self.consumed = True
        self.nodes.clear()


def current_record() -> ComputationRecord:
    """Innermost open record, else this thread's default record.

    Grad-enabled ops run outside any record accumulate on the default record
    until a backward consumes it or :func:`reset_default_record` drops it.
    """
    st = _state()
    if st.stack:
        return st.stack[-1]
    if st.default.consumed:
        st.default = ComputationRecord()
    return st.default


def reset_default_record():
    _state().default = ComputationRecord()


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def no_grad():
    st = _state()
    previous = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = previous


def make_op(name: str, data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    if settings.CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor._wrap(np.asarray(data))
    st = _state()
    if st.grad_enabled and any(t.requires_grad for t in inputs):
        rec = current_record()
        for t in inputs:
            if t._record is not None and t._record.consumed:
                raise StaleRecordError(f"{name}: input belongs to a consumed record")
        out.requires_grad = True
        out._record = rec
        rec.append(OpNode(name, tuple(inputs), out, adjoint))
    return out


def backward(loss: Tensor):
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._record is None:
        raise StaleRecordError("loss was not produced under an active computation record")
    loss._record.backward(loss)
