"""Primitive differentiable ops.

Shapes are checked explicitly on every op; the only broadcasting allowed is
the trailing-dimension bias of :func:`add_bias` and the shared right-hand
weight of :func:`matmul`.
"""

import builtins

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigError, DimensionError, NumericError
from .core import Tensor, make_op

NORM_EPS = 1e-6


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ============================================================================
# Elementwise
# ============================================================================
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return make_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def shift(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_op("shift", x.data + c, (x,), lambda g: (g,))


def add_bias(x, b) -> Tensor:
    """x + b where b matches the trailing dimensions of x."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def adjoint(g):
        return g, g.sum(axis=lead) if lead else g

    return make_op("add_bias", x.data + b.data, (x, b), adjoint)


def relu(x) -> Tensor:
    x = as_tensor(x)
    return make_op("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data).astype(x.dtype, copy=False)
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.data <= 0).any():
        raise NumericError("log: input must be strictly positive")
    return make_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Elementwise clamp; the subgradient is 0 on and outside the boundary."""
    if not lo < hi:
        raise ConfigError(f"clamp: lo ({lo}) must be below hi ({hi})")
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return make_op("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ============================================================================
# Shape
# ============================================================================
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: {x.shape} -> {shape}: {e}") from e
    return make_op("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    """Permute axes; with no axes the last two are swapped."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs at least two axes")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def adjoint(g):
        return np.split(g, sizes, axis=ax)

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, adjoint)


# ============================================================================
# Reductions
# ============================================================================
def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), adjoint)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_op("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), adjoint)


def mean_rows(x, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean over the row axis (-2) of a ``[..., T, d]`` tensor."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("mean_rows needs a [..., T, d] tensor")
    if weights is None:
        weights = np.ones(x.shape[:-1], dtype=x.dtype)
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape[:-1]:
        raise DimensionError(f"mean_rows: weights {weights.shape} do not match rows {x.shape[:-1]}")
    total = weights.sum(axis=-1)
    if (total <= 0).any():
        raise DimensionError("mean_rows: every sequence needs at least one weighted row")
    w = (weights / total[..., None])[..., None]
    return make_op("mean_rows", (x.data * w).sum(axis=-2), (x,), lambda g: (g[..., None, :] * w,))


# ============================================================================
# Linear algebra
# ============================================================================
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D weight shared by every leading index of ``a`` or a
    batch with exactly the same leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k, n = b.shape

        def adjoint(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")

        def adjoint(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_op("matmul", a.data @ b.data, (a, b), adjoint)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add_bias(y, bias)


# ============================================================================
# Normalization
# ============================================================================
def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks the entries that may receive weight."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def adjoint(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op("softmax_rows", y, (x,), adjoint)


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """Divide each row (last axis) by ``max(||row||_2, eps)``."""
    if eps <= 0:
        raise ConfigError("l2_normalize_rows: eps must be positive")
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    above = norm >= eps

    def adjoint(g):
        projected = g - y * (g * y).sum(axis=-1, keepdims=True)
        return (np.where(above, projected, g) / denom,)

    return make_op("l2_normalize_rows", y, (x,), adjoint)


def layer_norm(x, gain, bias, eps: float = NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} for width {d}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def adjoint(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return make_op("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), adjoint)


def batch_norm(
    x,
    gain,
    bias,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = NORM_EPS,
) -> Tensor:
    """Batch normalization over (N, H, W) of an ``[N, C, H, W]`` tensor.

    In training mode the batch statistics are used and the running buffers
    are updated in place; in eval mode the running statistics make this a
    fixed affine map.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"batch_norm: affine shapes {gain.shape}/{bias.shape} for {c} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * count / builtins.max(count - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    inv = (1.0 / np.sqrt(var + eps))[None, :, None, None]
    xhat = (x.data - mu[None, :, None, None]) * inv
    gain4 = gain.data[None, :, None, None]

    def adjoint(g):
        gxhat = g * gain4
        if training:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op("batch_norm", xhat * gain4 + bias.data[None, :, None, None], (x, gain, bias), adjoint)


def channel_affine(x, gamma, beta) -> Tensor:
    """Per-channel ``gamma * x + beta`` over an ``[N, C, H, W]`` map; gamma/beta are ``[N, C]``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4 or gamma.shape != x.shape[:2] or beta.shape != x.shape[:2]:
        raise DimensionError(
            f"channel_affine: map {x.shape} with gamma {gamma.shape} and beta {beta.shape}"
        )
    g4, b4 = gamma.data[:, :, None, None], beta.data[:, :, None, None]

    def adjoint(g):
        return g * g4, (g * x.data).sum(axis=(2, 3)), g.sum(axis=(2, 3))

    return make_op("channel_affine", x.data * g4 + b4, (x, gamma, beta), adjoint)


# ============================================================================
# Convolution
# ============================================================================
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``[N, C_in, H, W]`` (or ``[C_in, H, W]``) input."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), weight, bias, stride, padding)
        return reshape(y, y.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: kernel expects {ci} input channels, got {c}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def adjoint(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return gxp[:, :, padding : padding + h, padding : padding + w], gw

    y = make_op("conv2d", np.ascontiguousarray(out), (x, weight), adjoint)
    if bias is None:
        return y
    bias = as_tensor(bias)
    if bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {o} output channels")
    return add_channel_bias(y, bias)


def conv_transpose2d(x, weight, bias=None, stride: int = 2) -> Tensor:
    """Transposed convolution; ``weight`` is ``[C_in, C_out, k, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"conv_transpose2d: input {x.shape}, kernel {weight.shape}")
    n, c, h, w = x.shape
    _, o, kh, kw = weight.shape
    out = np.zeros((n, o, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=x.dtype)
    taps = np.tensordot(x.data, weight.data, axes=([1], [0]))  # N,H,W,O,kh,kw
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += (
                taps[..., i, j].transpose(0, 3, 1, 2)
            )

    def adjoint(g):
        gtaps = np.empty((n, h, w, o, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gtaps[..., i, j] = g[
                    :, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride
                ].transpose(0, 2, 3, 1)
        gx = np.tensordot(gtaps, weight.data, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gtaps, axes=([0, 2, 3], [0, 1, 2]))
        return gx, gw

    y = make_op("conv_transpose2d", out, (x, weight), adjoint)
    if bias is None:
        return y
    return add_channel_bias(y, as_tensor(bias))


def add_channel_bias(x, bias) -> Tensor:
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_channel_bias: bias {bias.shape} for map {x.shape}")
    return make_op(
        "add_channel_bias",
        x.data + bias.data[None, :, None, None],
        (x, bias),
        lambda g: (g, g.sum(axis=(0, 2, 3))),
    )


# ============================================================================
# Patches
# ============================================================================
def unfold_patches(x, p: int) -> Tensor:
    """Split ``[N, C, H, W]`` into raster-ordered, channel-major flattened p x p patches.

    Returns ``[N, (H/p)(W/p), C*p*p]``; a 3-D input gives ``[(H/p)(W/p), C*p*p]``.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        y = unfold_patches(reshape(x, (1,) + x.shape), p)
        return reshape(y, y.shape[1:])
    n, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ConfigError(f"unfold_patches: {h}x{w} map is not divisible by patch size {p}")
    nh, nw = h // p, w // p
    y = x.data.reshape(n, c, nh, p, nw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, nh * nw, c * p * p)

    def adjoint(g):
        return (g.reshape(n, nh, nw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w),)

    return make_op("unfold_patches", y, (x,), adjoint)


def fold_patches(patches, p: int, shape) -> Tensor:
    """Inverse of :func:`unfold_patches` for non-overlapping patches; ``shape`` is ``(C, H, W)``."""
    patches = as_tensor(patches)
    c, h, w = shape
    if patches.ndim == 2:
        y = fold_patches(reshape(patches, (1,) + patches.shape), p, shape)
        return reshape(y, y.shape[1:])
    n = patches.shape[0]
    nh, nw = h // p, w // p
    if patches.shape[1:] != (nh * nw, c * p * p):
        raise DimensionError(f"fold_patches: {patches.shape} cannot form {shape} with p={p}")
    y = patches.data.reshape(n, nh, nw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)

    def adjoint(g):
        return (g.reshape(n, c, nh, p, nw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, nh * nw, c * p * p),)

    return make_op("fold_patches", y, (patches,), adjoint)


# ============================================================================
# Lookup and losses
# ============================================================================
def embedding(ids: np.ndarray, table) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {table.shape[0]})")

    def adjoint(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_op("embedding", table.data[ids], (table,), adjoint)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} for logits {logits.shape}")
    if weights is None:
        weights = np.ones(targets.shape, dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    total = float(weights.sum())
    if total <= 0:
        raise DimensionError("cross_entropy: no positions carry weight")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(weights * picked).sum() / total

    def adjoint(g):
        probs = np.exp(logp)
        np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1, -1)
        return (g * probs * (weights / total)[..., None],)

    return make_op("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), adjoint)


def binary_cross_entropy(pred, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Mean BCE of probabilities ``pred`` against a {0, 1} ``target``; pred is clamped to [eps, 1-eps]."""
    pred = as_tensor(pred)
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise DimensionError(f"binary_cross_entropy: target {target.shape} for pred {pred.shape}")
    y = Tensor(target, dtype=pred.dtype)
    not_y = Tensor(1.0 - target, dtype=pred.dtype)
    p = clamp(pred, eps, 1.0 - eps)
    ll = add(mul(y, log(p)), mul(not_y, log(shift(scale(p, -1.0), 1.0))))
    return scale(mean(ll), -1.0)
