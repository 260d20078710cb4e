"""Mini U-Net: residual encoder with four skip outputs, bridge, up-convolution decoder."""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import UNetConfig
from .errors import DimensionError, MaskError
from .fusion import SkipFeature
from .tensor import BatchNorm2d, Conv2d, ConvTranspose2d, Module, ModuleList, Tensor
from .tensor import ops

logger = logging.getLogger(__name__)

SkipModulator = Callable[[list[SkipFeature]], list[SkipFeature]]


class ConvBlock(Module):
    """3x3 conv -> batch norm, optionally followed by relu."""

    def __init__(self, cin: int, cout: int, rng, stride: int = 1, relu: bool = True, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y


class ResidualBlock(Module):
    """``depth`` conv-bn sub-blocks; the identity is added before the last activation."""

    def __init__(self, channels: int, depth: int, rng, dtype=np.float32):
        super().__init__()
        self.subs = ModuleList(
            [ConvBlock(channels, channels, rng, relu=i < depth - 1, dtype=dtype) for i in range(depth)]
        )

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for sub in self.subs:
            y = sub(y)
        return ops.relu(ops.add(y, x))


class UpStep(Module):
    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        super().__init__()
        self.up = ConvTranspose2d(cin, cout, rng, dtype=dtype)
        self.conv1 = ConvBlock(2 * cout, cout, rng, dtype=dtype)
        self.conv2 = ConvBlock(cout, cout, rng, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.conv2(self.conv1(ops.concat([self.up(x), skip], axis=1)))


@dataclass
class UNetOutput:
    probs: Tensor  # [N, 1, H, W]
    skips: list[SkipFeature]
    modulated: list[SkipFeature]


def pyramid_shapes(cfg: UNetConfig, height: int, width: int) -> dict:
    """Skip and bridge shapes for an input size, without building any weights."""
    if height % 16 or width % 16:
        raise DimensionError(f"input {height}x{width} is not divisible by 16")
    skips = [(c, height >> k, width >> k) for k, c in enumerate(cfg.widths)]
    return {"skips": skips, "bridge": (cfg.bridge_width, height // 8, width // 8)}


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.widths
        depth = cfg.residual_depth

        self.stem = ConvBlock(cfg.in_channels, c1, rng, dtype=dtype)
        self.enc1 = ResidualBlock(c1, depth, rng, dtype)
        self.down2 = ConvBlock(c1, c2, rng, stride=2, dtype=dtype)
        self.enc2 = ResidualBlock(c2, depth, rng, dtype)
        self.down3 = ConvBlock(c2, c3, rng, stride=2, dtype=dtype)
        self.enc3 = ResidualBlock(c3, depth, rng, dtype)
        self.down4 = ConvBlock(c3, c4, rng, stride=2, dtype=dtype)
        self.enc4 = ResidualBlock(c4, depth, rng, dtype)

        self.bridge_in = ConvBlock(c4, cfg.bridge_width, rng, dtype=dtype)
        self.bridge = ResidualBlock(cfg.bridge_width, depth, rng, dtype)

        self.dec4a = ConvBlock(cfg.bridge_width + c4, c4, rng, dtype=dtype)
        self.dec4b = ConvBlock(c4, c4, rng, dtype=dtype)
        self.up3 = UpStep(c4, c3, rng, dtype)
        self.up2 = UpStep(c3, c2, rng, dtype)
        self.up1 = UpStep(c2, c1, rng, dtype)
        self.head = Conv2d(c1, 1, 1, rng, dtype=dtype)

    @property
    def skip_channels(self) -> list[int]:
        return list(self.cfg.widths)

    def encode(self, images: Tensor) -> tuple[Tensor, list[SkipFeature]]:
        x = ops.as_tensor(images)
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"U-Net expects [N, {self.cfg.in_channels}, H, W], got {x.shape}")
        if x.shape[2] % 16 or x.shape[3] % 16:
            raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} is not divisible by 16")

        s1 = self.enc1(self.stem(x))
        s2 = self.enc2(self.down2(s1))
        s3 = self.enc3(self.down3(s2))
        s4 = self.enc4(self.down4(s3))
        bridge = self.bridge(self.bridge_in(s4))
        skips = [SkipFeature(k, s) for k, s in enumerate((s1, s2, s3, s4), start=1)]
        return bridge, skips

    def decode(self, bridge: Tensor, skips: list[SkipFeature]) -> Tensor:
        if [s.level for s in skips] != [1, 2, 3, 4]:
            raise DimensionError("decode needs skips for levels 1..4 in order")
        h, w = bridge.shape[-2:]
        for s in skips:
            scale = 2 ** (4 - s.level)
            if s.map.shape[-2:] != (h * scale, w * scale) or s.map.shape[0] != bridge.shape[0]:
                raise DimensionError(
                    f"skip level {s.level} has shape {s.map.shape}, bridge {bridge.shape} implies "
                    f"{h * scale}x{w * scale}"
                )
        s1, s2, s3, s4 = (s.map for s in skips)
        x = self.dec4b(self.dec4a(ops.concat([bridge, s4], axis=1)))
        x = self.up3(x, s3)
        x = self.up2(x, s2)
        x = self.up1(x, s1)
        return ops.sigmoid(self.head(x))

    def forward(self, images: Tensor, modulate: Optional[SkipModulator] = None) -> UNetOutput:
        bridge, skips = self.encode(images)
        modulated = modulate(skips) if modulate is not None else skips
        return UNetOutput(self.decode(bridge, modulated), skips, modulated)


def seg_loss(pred: Tensor, mask: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Pixel-averaged binary cross-entropy of probabilities against a {0, 1} mask."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise MaskError("segmentation mask must contain only 0 and 1")
    return ops.binary_cross_entropy(pred, mask, eps)


def dice_score(pred: np.ndarray, mask: np.ndarray, threshold: float = 0.5, smooth: float = 1e-6) -> float:
    """Mean per-image Dice coefficient of thresholded probabilities."""
    pred = np.asarray(pred)
    mask = np.asarray(mask)
    if pred.ndim == 3:
        pred, mask = pred[None], mask[None]
    hard = pred >= threshold
    truth = mask > 0.5
    axes = tuple(range(1, pred.ndim))
    inter = (hard & truth).sum(axis=axes)
    total = hard.sum(axis=axes) + truth.sum(axis=axes)
    return float(np.mean((2 * inter + smooth) / (total + smooth)))
