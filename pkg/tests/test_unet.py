import math

import numpy as np
import pytest

from src.config import FusionConfig, UNetConfig
from src.errors import DimensionError, MaskError
from src.fusion import FusionStack, SkipFeature
from src.tensor import ComputationRecord, Tensor, no_grad
from src.tensor import ops
from src.tensor.gradcheck import check_module
from src.unet import UNet, dice_score, pyramid_shapes, seg_loss

TINY_UNET = UNetConfig(image_size=32, widths=[4, 8, 16, 32], bridge_width=32, residual_depth=1)


@pytest.fixture
def unet():
    return UNet(TINY_UNET, np.random.default_rng(11))


# ============================================================================
# Encoder pyramid
# ============================================================================
def test_pyramid_shapes_for_toy_widths():
    cfg = UNetConfig(image_size=64, widths=[16, 32, 64, 128], bridge_width=256)
    shapes = pyramid_shapes(cfg, 64, 64)
    assert shapes["skips"] == [(16, 64, 64), (32, 32, 32), (64, 16, 16), (128, 8, 8)]
    assert shapes["bridge"] == (256, 8, 8)


def test_pyramid_shapes_at_full_resolution():
    cfg = UNetConfig(image_size=512, widths=[64, 128, 256, 512], bridge_width=1024)
    assert pyramid_shapes(cfg, 512, 512)["bridge"][1:] == (64, 64)


def test_pyramid_rejects_indivisible_size():
    with pytest.raises(DimensionError):
        pyramid_shapes(TINY_UNET, 40, 32)


def test_encode_emits_four_skips_at_strides(unet):
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    with no_grad():
        bridge, skips = unet.encode(x)
    assert [s.level for s in skips] == [1, 2, 3, 4]
    assert [s.map.shape for s in skips] == [(2, 4, 32, 32), (2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4)]
    assert bridge.shape == (2, 32, 4, 4)


def test_encode_rejects_indivisible_and_wrong_channels(unet):
    with pytest.raises(DimensionError):
        unet.encode(np.zeros((1, 3, 24, 24), dtype=np.float32))
    with pytest.raises(DimensionError):
        unet.encode(np.zeros((1, 1, 32, 32), dtype=np.float32))


def test_zero_image_is_deterministic_for_a_seed():
    zeros = np.zeros((3, 32, 32), dtype=np.float32)
    a = UNet(TINY_UNET, np.random.default_rng(5)).eval()
    b = UNet(TINY_UNET, np.random.default_rng(5)).eval()
    with no_grad():
        _, sa = a.encode(zeros)
        _, sb = b.encode(zeros)
    for x, y in zip(sa, sb):
        assert np.array_equal(x.map.data, y.map.data)


# ============================================================================
# Decoder
# ============================================================================
def test_probabilities_stay_in_unit_interval(unet):
    x = np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32)
    with no_grad():
        probs = unet(x).probs.data
    assert probs.shape == (2, 1, 32, 32)
    assert probs.min() >= 0.0 and probs.max() <= 1.0


def test_identity_film_decode_matches_plain_unet(unet):
    unet.eval()
    stack = FusionStack(FusionConfig(embed_dim=8, level_to_layer={1: 0, 2: 1, 3: 2, 4: 3}), unet.skip_channels, np.random.default_rng(2))
    hidden = {i: Tensor(np.random.default_rng(i).normal(size=(1, 5, 8)).astype(np.float32)) for i in range(4)}
    x = np.random.default_rng(3).uniform(size=(1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        plain = unet(x).probs.data
        fused = unet(x, modulate=lambda skips: stack.modulate_skips(skips, hidden)).probs.data
    assert np.array_equal(plain, fused)


def test_decode_rejects_pyramid_mismatch(unet):
    with no_grad():
        bridge, skips = unet.encode(np.zeros((1, 3, 32, 32), dtype=np.float32))
    with pytest.raises(DimensionError):
        unet.decode(bridge, skips[:3])
    bad = skips[:3] + [SkipFeature(4, Tensor(np.zeros((1, 32, 2, 2), dtype=np.float32)))]
    with pytest.raises(DimensionError):
        unet.decode(bridge, bad)


def test_decode_gradients_match_finite_differences():
    net = UNet(TINY_UNET, np.random.default_rng(4))
    x = np.random.default_rng(6).uniform(size=(2, 3, 32, 32))
    mask = (np.random.default_rng(7).uniform(size=(2, 1, 32, 32)) > 0.7).astype(float)

    def loss_fn(dtype):
        return seg_loss(net(Tensor(x.astype(dtype))).probs, mask)

    results = check_module(net, loss_fn, lambda name: "unet", np.random.default_rng(8), coords_per_tensor=1)
    assert results["unet"].passed(1e-3, 1e-5), results["unet"]


# ============================================================================
# Loss and metrics
# ============================================================================
def test_seg_loss_perfect_and_uniform_predictions():
    y = (np.random.default_rng(9).uniform(size=(1, 8, 8)) > 0.5).astype(float)
    assert float(seg_loss(Tensor(y, dtype=np.float64), y).data) <= 1e-5
    half = Tensor(np.full((1, 8, 8), 0.5), dtype=np.float64)
    assert float(seg_loss(half, y).data) == pytest.approx(math.log(2), abs=1e-6)


def test_seg_loss_matches_pixel_loop():
    rng = np.random.default_rng(10)
    for trial in range(100):
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        p = rng.uniform(0.01, 0.99, size=shape)
        y = (rng.uniform(size=shape) > rng.uniform(0.1, 0.9)).astype(float)
        expected = 0.0
        for idx in np.ndindex(shape):
            expected -= y[idx] * math.log(p[idx]) + (1 - y[idx]) * math.log(1 - p[idx])
        expected /= p.size
        assert abs(float(seg_loss(Tensor(p, dtype=np.float64), y).data) - expected) < 1e-5, trial


def test_seg_loss_rejects_non_binary_mask():
    with pytest.raises(MaskError):
        seg_loss(Tensor(np.full((1, 2, 2), 0.5)), np.array([[[0, 1], [0.5, 0]]]))


def test_seg_loss_is_non_negative_and_backpropagates():
    p = Tensor(np.random.default_rng(12).uniform(0.1, 0.9, (1, 4, 4)), requires_grad=True, dtype=np.float64)
    y = np.zeros((1, 4, 4))
    with ComputationRecord() as record:
        loss = seg_loss(p, y)
        record.backward(loss)
    assert float(loss.data) >= 0
    # d/dp of -log(1 - p) averaged over 16 pixels
    assert np.allclose(p.grad, 1 / (16 * (1 - p.data)))


def test_dice_score_examples():
    mask = np.zeros((1, 4, 4))
    mask[0, :2] = 1
    assert dice_score(mask, mask) == pytest.approx(1.0)
    assert dice_score(1 - mask, mask) == pytest.approx(0.0, abs=1e-6)
    assert dice_score(np.zeros_like(mask), np.zeros_like(mask)) == pytest.approx(1.0)
    half = mask.copy()
    half[0, 1] = 0
    assert dice_score(half, mask) == pytest.approx(2 * 4 / (4 + 8))


def test_relu_residual_output_is_non_negative(unet):
    with no_grad():
        out = unet.enc1(Tensor(np.random.default_rng(13).normal(size=(1, 4, 8, 8)).astype(np.float32)))
    assert (ops.as_tensor(out).data >= 0).all()
