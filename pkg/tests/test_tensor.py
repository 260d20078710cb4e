import threading

import numpy as np
import pytest

from src.errors import ConfigError, DimensionError, NumericError, StaleRecordError
from src.tensor import (
    BatchNorm2d,
    ComputationRecord,
    Linear,
    Parameter,
    Tensor,
    backward,
    current_record,
    no_grad,
    reset_default_record,
)
from src.tensor import ops
from src.tensor.gradcheck import check_module, relative_error


def finite_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = fn(x)
        x[idx] = orig - h
        minus = fn(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def analytic(op, *arrays):
    """Gradients of ``sum(op(*inputs) * projection)`` for a fixed random projection."""
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with ComputationRecord() as record:
        out = op(*inputs)
        projection = np.random.default_rng(99).normal(size=out.shape)
        loss = ops.sum(ops.mul(out, Tensor(projection, dtype=np.float64)))
        record.backward(loss)
    return [t.grad for t in inputs], projection


def check_op(op, *arrays, tol=1e-5):
    grads, projection = analytic(op, *arrays)
    for i, a in enumerate(arrays):
        def scalar(x, i=i):
            args = [Tensor(x if j == i else arrays[j], dtype=np.float64) for j in range(len(arrays))]
            with no_grad():
                return float((op(*args).data * projection).sum())

        numeric = finite_difference(scalar, np.array(arrays[i], dtype=np.float64))
        assert relative_error(grads[i], numeric) < tol, f"input {i}"


# ============================================================================
# Forward examples
# ============================================================================
def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(np.eye(2), m).data, m)
    out = ops.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv2d_sum_kernel_and_stride():
    out = ops.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1)
    assert out.data.item() == pytest.approx(9.0)
    halved = ops.conv2d(np.ones((1, 2, 8, 8)), np.ones((4, 2, 3, 3)), stride=2, padding=1)
    assert halved.shape == (1, 4, 4, 4)


def test_l2_normalize_rows_examples():
    assert np.allclose(ops.l2_normalize_rows(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]])
    assert np.array_equal(ops.l2_normalize_rows(np.zeros((1, 3))).data, np.zeros((1, 3)))
    unit = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert np.allclose(ops.l2_normalize_rows(unit).data, unit, atol=1e-7)


def test_softmax_rows_uniform_and_stable():
    assert np.allclose(ops.softmax_rows(np.zeros((1, 3))).data, 1 / 3)
    big = ops.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    assert big[0, 0] == pytest.approx(1.0)
    rows = ops.softmax_rows(np.random.default_rng(1).normal(0, 20, (5, 7))).data
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-6)
    assert (rows >= 0).all()


def test_layer_norm_examples():
    gain, bias = np.ones(4), np.zeros(4)
    assert np.array_equal(ops.layer_norm(np.zeros((2, 4)), gain, bias).data, np.zeros((2, 4)))
    shifted = ops.layer_norm(np.full((1, 4), 3.0), gain, np.full(4, 0.5)).data
    assert np.allclose(shifted, 0.5)
    x = np.random.default_rng(2).normal(3, 5, (6, 16))
    y = ops.layer_norm(x, np.ones(16), np.zeros(16)).data
    assert np.allclose(y.mean(axis=-1), 0, atol=1e-5)
    assert np.allclose(y.var(axis=-1), 1, atol=1e-5)


def test_clamp_examples_and_boundary_gradient():
    assert ops.clamp(np.array(7.0), -5, 5).data == 5
    assert ops.clamp(np.array(-9.0), -5, 5).data == -5
    assert ops.clamp(np.array(0.3), -5, 5).data == pytest.approx(0.3)
    with pytest.raises(ConfigError):
        ops.clamp(np.array(1.0), 5, 5)
    x = Tensor(np.array([-6.0, -5.0, 0.0, 5.0, 6.0]), requires_grad=True)
    with ComputationRecord() as record:
        record.backward(ops.sum(ops.clamp(x, -5, 5)))
    assert np.array_equal(x.grad, [0, 0, 1, 0, 0])


def test_unfold_then_fold_reconstructs():
    x = np.random.default_rng(3).normal(size=(2, 3, 8, 12))
    patches = ops.unfold_patches(x, 4)
    assert patches.shape == (2, 6, 48)
    assert np.array_equal(ops.fold_patches(patches, 4, (3, 8, 12)).data, x)


def test_unfold_rejects_indivisible_map():
    with pytest.raises(ConfigError):
        ops.unfold_patches(np.ones((1, 6, 6)), 4)


def test_log_rejects_non_positive():
    with pytest.raises(NumericError):
        ops.log(np.array([1.0, 0.0]))


def test_batch_norm_eval_is_affine():
    bn = BatchNorm2d(3, dtype=np.float64)
    bn.astype(np.float64)
    x = np.random.default_rng(4).normal(2, 3, (4, 3, 5, 5))
    bn(Tensor(x))  # one training step moves the running statistics
    bn.eval()
    a = bn(Tensor(x)).data
    b = bn(Tensor(2 * x)).data
    c = bn(Tensor(np.zeros_like(x))).data
    assert np.allclose(b - c, 2 * (a - c))
    assert np.array_equal(bn(Tensor(x)).data, a)


# ============================================================================
# Gradients
# ============================================================================
def test_backward_sum_and_half_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with ComputationRecord() as record:
        record.backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones(3))

    y = Tensor(np.array([1.5, -2.0]), requires_grad=True, dtype=np.float64)
    with ComputationRecord() as record:
        record.backward(ops.scale(ops.sum(ops.mul(y, y)), 0.5))
    assert np.allclose(y.grad, y.data)


def test_backward_rejects_non_scalar_and_reuse():
    x = Tensor(np.ones(3), requires_grad=True)
    with ComputationRecord() as record:
        y = ops.scale(x, 2.0)
        with pytest.raises(DimensionError):
            record.backward(y)
        loss = ops.sum(y)
        record.backward(loss)
        with pytest.raises(StaleRecordError):
            record.backward(loss)
        with pytest.raises(StaleRecordError):
            ops.scale(y, 2.0)


def test_module_level_backward_uses_default_record():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    assert x.grad[0] == pytest.approx(4.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ComputationRecord() as record, no_grad():
        y = ops.scale(x, 3.0)
    assert len(record) == 0
    assert not y.requires_grad


def test_record_is_confined_to_its_thread():
    record = ComputationRecord()
    errors = []

    def worker():
        try:
            with record:
                ops.scale(Tensor(np.ones(1), requires_grad=True), 2.0)
        except StaleRecordError as e:
            errors.append(e)

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert errors


RNG = np.random.default_rng(5)


@pytest.mark.parametrize(
    "op,arrays",
    [
        (ops.matmul, [RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))]),
        (ops.matmul, [RNG.normal(size=(2, 3, 4)), RNG.normal(size=(2, 4, 5))]),
        (ops.softmax_rows, [RNG.normal(size=(3, 5))]),
        (ops.l2_normalize_rows, [RNG.normal(size=(4, 3))]),
        (ops.layer_norm, [RNG.normal(size=(3, 6)), RNG.normal(size=6), RNG.normal(size=6)]),
        (ops.relu, [RNG.normal(size=(4, 4)) + 0.05]),
        (ops.sigmoid, [RNG.normal(size=(3, 3))]),
        (lambda x, w: ops.conv2d(x, w, stride=2, padding=1), [RNG.normal(size=(2, 2, 6, 6)), RNG.normal(size=(3, 2, 3, 3))]),
        (lambda x, w, b: ops.conv_transpose2d(x, w, b), [RNG.normal(size=(1, 3, 3, 3)), RNG.normal(size=(3, 2, 2, 2)), RNG.normal(size=2)]),
        (ops.channel_affine, [RNG.normal(size=(2, 3, 4, 4)), RNG.normal(size=(2, 3)), RNG.normal(size=(2, 3))]),
        (lambda x: ops.unfold_patches(x, 2), [RNG.normal(size=(1, 2, 4, 4))]),
        (lambda x: ops.mean_rows(x, np.array([[1.0, 1.0, 0.0]])), [RNG.normal(size=(1, 3, 4))]),
        (lambda x: ops.cross_entropy(x, np.array([[1, 0, 2]]), np.array([[1.0, 0.0, 1.0]])), [RNG.normal(size=(1, 3, 4))]),
        (lambda x: ops.binary_cross_entropy(x, np.array([[0.0, 1.0], [1.0, 0.0]])), [RNG.uniform(0.1, 0.9, (2, 2))]),
        (lambda a, b: ops.concat([a, b], axis=1), [RNG.normal(size=(2, 2, 3)), RNG.normal(size=(2, 1, 3))]),
    ],
)
def test_op_gradients_match_finite_differences(op, arrays):
    check_op(op, *arrays)


def test_batch_norm_training_gradient():
    running_mean, running_var = np.zeros(2), np.ones(2)

    def op(x, g, b):
        return ops.batch_norm(x, g, b, running_mean.copy(), running_var.copy(), training=True)

    check_op(op, RNG.normal(size=(3, 2, 2, 2)), RNG.normal(size=2), RNG.normal(size=2))


def test_check_module_on_linear_stack(rng):
    layer = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))

    def loss_fn(dtype):
        return ops.mean(ops.mul(layer(Tensor(x.astype(dtype))), layer(Tensor(x.astype(dtype)))))

    results = check_module(layer, loss_fn, lambda name: "all", rng, coords_per_tensor=3)
    assert results["all"].tensors == 2
    assert results["all"].passed(1e-3, 1e-5)
    assert layer.weight.dtype == np.float32


def test_parameter_defaults_to_requiring_grad():
    p = Parameter(np.zeros(3))
    assert p.requires_grad


def test_unscoped_ops_accumulate_until_the_default_record_is_reset():
    reset_default_record()
    w = Parameter(np.ones(3))
    for _ in range(5):
        ops.mul(w, w)
    assert len(current_record()) == 5
    with no_grad():
        ops.mul(w, w)
    assert len(current_record()) == 5

    reset_default_record()
    assert len(current_record()) == 0
    loss = ops.sum(ops.mul(w, w))
    backward(loss)
    assert np.allclose(w.grad, 2.0)
    assert len(current_record()) == 0
