"""Image standardization: resizing, normalization and watermark removal.

Watermarks are isolated inside a rectangle, thresholded on luminance,
dilated once with a 3x3 kernel and then filled by fast-marching inpainting:
masked pixels are finalized in increasing order of their arrival time from
the mask boundary and each one is set to a weighted mean of the already
known pixels within ``radius``.
"""

import fnmatch
import heapq
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation

from .errors import ConfigError, MaskError

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = (".png", ".ppm")

_KNOWN, _BAND, _INSIDE = 0, 1, 2


# ============================================================================
# I/O
# ============================================================================
def read_image(path) -> np.ndarray:
    """RGB uint8 ``[H, W, 3]`` from a PNG or PPM file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path) -> np.ndarray:
    """Binary uint8 ``[H, W]`` from a single-channel {0, 255} image."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_png(path, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(array)).save(path, format="PNG")


def write_mask(path, mask: np.ndarray):
    write_png(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


# ============================================================================
# Resize and normalize
# ============================================================================
def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    if height <= 0 or width <= 0:
        raise ConfigError(f"resize target {height}x{width} is degenerate")
    if img.shape[:2] == (height, width):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((width, height), Image.Resampling.BILINEAR))


def resize_normalize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize then divide by 255: ``[H, W, 3] uint8 -> [3, height, width] float32``."""
    out = resize_image(img, height, width).astype(np.float32) / 255.0
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    if mask.shape == (height, width):
        return (mask > 0).astype(np.uint8)
    im = Image.fromarray((mask > 0).astype(np.uint8) * 255)
    return (np.asarray(im.resize((width, height), Image.Resampling.NEAREST)) > 127).astype(np.uint8)


# ============================================================================
# Watermark mask
# ============================================================================
@dataclass(frozen=True)
class WatermarkSpec:
    x: int
    y: int
    w: int
    h: int
    threshold: int = 200

    def check_bounds(self, height: int, width: int):
        if self.w <= 0 or self.h <= 0 or self.x < 0 or self.y < 0:
            raise ConfigError(f"watermark region {self} is empty or negative")
        if self.x + self.w > width or self.y + self.h > height:
            raise ConfigError(f"watermark region {self} exceeds the {width}x{height} image")
        if not 0 <= self.threshold <= 255:
            raise ConfigError(f"watermark threshold {self.threshold} outside [0, 255]")


def luminance(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) @ LUMA


def build_watermark_mask(img: np.ndarray, spec: WatermarkSpec) -> np.ndarray:
    """Bright pixels inside the spec region, grown by one 3x3 dilation and cut back to the region."""
    height, width = img.shape[:2]
    spec.check_bounds(height, width)
    region = np.zeros((height, width), dtype=bool)
    region[spec.y : spec.y + spec.h, spec.x : spec.x + spec.w] = True

    mask = np.zeros((height, width), dtype=bool)
    window = (slice(spec.y, spec.y + spec.h), slice(spec.x, spec.x + spec.w))
    mask[window] = luminance(img[window]) >= spec.threshold
    mask = binary_dilation(mask, structure=np.ones((3, 3), dtype=bool), iterations=1)
    return mask & region


def load_watermark_specs(path) -> dict[str, WatermarkSpec]:
    """JSON object mapping file-name glob -> ``{x, y, w, h[, threshold]}``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"watermark spec file not found: {path}")
    raw = json.loads(path.read_text())
    try:
        return {pattern: WatermarkSpec(**fields) for pattern, fields in raw.items()}
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


def match_watermark(name: str, specs: dict[str, WatermarkSpec]) -> Optional[WatermarkSpec]:
    for pattern, spec in specs.items():
        if fnmatch.fnmatch(name, pattern):
            return spec
    return None


# ============================================================================
# Fast-marching inpainting
# ============================================================================
def _solve(t: np.ndarray, flag: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> float:
    """Arrival time from one horizontal and one vertical neighbour (first-order upwind eikonal)."""
    ka, kb = flag[a] == _KNOWN, flag[b] == _KNOWN
    if ka and kb:
        ta, tb = t[a], t[b]
        disc = 2.0 - (ta - tb) ** 2
        if disc >= 0:
            s = (ta + tb + np.sqrt(disc)) / 2.0
            if s >= ta and s >= tb:
                return float(s)
        return float(min(ta, tb) + 1.0)
    if ka:
        return float(t[a] + 1.0)
    if kb:
        return float(t[b] + 1.0)
    return np.inf


def _arrival(t, flag, i, j) -> float:
    return min(
        _solve(t, flag, (i - 1, j), (i, j - 1)),
        _solve(t, flag, (i + 1, j), (i, j - 1)),
        _solve(t, flag, (i - 1, j), (i, j + 1)),
        _solve(t, flag, (i + 1, j), (i, j + 1)),
    )


def _time_gradient(t, flag, i, j) -> tuple[float, float]:
    def axis(lo, hi):
        lo_ok, hi_ok = flag[lo] != _INSIDE, flag[hi] != _INSIDE
        if lo_ok and hi_ok:
            return (t[hi] - t[lo]) / 2.0
        if hi_ok:
            return t[hi] - t[i, j]
        if lo_ok:
            return t[i, j] - t[lo]
        return 0.0

    return axis((i - 1, j), (i + 1, j)), axis((i, j - 1), (i, j + 1))


def inpaint_fmm(img: np.ndarray, mask: np.ndarray, radius: int = 3, return_order: bool = False):
    """Fill ``mask`` pixels of ``img`` from the surrounding known pixels.

    Pixels outside the mask are returned unchanged. With ``return_order`` the
    list of ``(time, row, col)`` in the order pixels were filled is returned too.
    """
    img = np.asarray(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise MaskError(f"mask {mask.shape} does not match image {img.shape[:2]}")
    if mask.all():
        raise MaskError("cannot inpaint a fully masked image")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise MaskError("inpainting mask must not touch the image border")

    out = img.copy()
    order: list[tuple[float, int, int]] = []
    if not mask.any():
        return (out, order) if return_order else out

    height, width = mask.shape
    work = img.astype(np.float64).reshape(height, width, -1)
    flag = np.where(mask, _INSIDE, _KNOWN).astype(np.int8)
    t = np.where(mask, np.inf, 0.0)

    # Known pixels 4-adjacent to the mask seed the front
    grown = binary_dilation(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool))
    heap = [(0.0, int(i), int(j)) for i, j in zip(*np.nonzero(grown & ~mask))]
    heapq.heapify(heap)
    flag[grown & ~mask] = _BAND

    di, dj = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    keep = (di**2 + dj**2 <= radius**2) & ((di != 0) | (dj != 0))
    di, dj = di[keep], dj[keep]

    while heap:
        ti, i, j = heapq.heappop(heap)
        if flag[i, j] == _KNOWN or ti > t[i, j]:
            continue
        if mask[i, j]:
            work[i, j] = _weighted_fill(work, flag, t, i, j, di, dj)
            order.append((ti, i, j))
        flag[i, j] = _KNOWN

        for k, l in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if not (0 <= k < height and 0 <= l < width) or not mask[k, l] or flag[k, l] == _KNOWN:
                continue
            tk = _arrival(t, flag, k, l)
            if tk < t[k, l]:
                t[k, l] = tk
                flag[k, l] = _BAND
                heapq.heappush(heap, (tk, k, l))

    filled = np.clip(np.rint(work), 0, 255).reshape(img.shape).astype(img.dtype)
    out[mask] = filled[mask]
    logger.debug("inpainted %d pixels", len(order))
    return (out, order) if return_order else out


def _weighted_fill(work, flag, t, i, j, di, dj) -> np.ndarray:
    height, width = flag.shape
    ks, ls = i + di, j + dj
    inside = (ks >= 0) & (ks < height) & (ls >= 0) & (ls < width)
    ks, ls, ri, rj = ks[inside], ls[inside], di[inside], dj[inside]
    known = flag[ks, ls] == _KNOWN
    ks, ls, ri, rj = ks[known], ls[known], ri[known], rj[known]

    gi, gj = _time_gradient(t, flag, i, j)
    length = np.sqrt(ri**2 + rj**2)
    # r points from the filled pixel towards the neighbour
    direction = np.abs(-(ri * gi + rj * gj) / length)
    direction = np.where(direction <= 0.01, 1e-6, direction)
    distance = 1.0 / (length**3)
    level = 1.0 / (1.0 + np.abs(t[ks, ls] - t[i, j]))
    w = direction * distance * level
    total = w.sum()
    if total <= 0:
        return work[ks, ls].mean(axis=0)
    return (w[:, None] * work[ks, ls]).sum(axis=0) / total


def preprocess_image(
    img: np.ndarray,
    size: int,
    watermark: Optional[WatermarkSpec] = None,
    radius: int = 3,
) -> np.ndarray:
    """Watermark removal (when a spec applies) at native resolution, then resize. Returns uint8 ``[size, size, 3]``."""
    if watermark is not None:
        img = inpaint_fmm(img, build_watermark_mask(img, watermark), radius=radius)
    return resize_image(img, size, size)
