"""Cross-modal fusion between U-Net skip features and the vision-language model.

Two directions are wired here:

* skip -> vision: every skip level is cut into patches, projected to the
  model width and attended to by the vision embedding; the normalized,
  scaled and clamped result is projected by a shared output layer, layer
  normalized and added back onto the embedding that feeds the level's
  cross-attention layer.
* text -> skip: hidden states of a cross-attention layer are normalized,
  mean-pooled into one descriptor and turned into per-channel FiLM
  parameters that modulate the skip map before the U-Net decoder uses it.

Norms are taken per row (token or patch) with an eps guard.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import FusionConfig
from .errors import ConfigError, DimensionError
from .tensor import LayerNorm, Linear, Module, ModuleDict, Tensor
from .tensor import ops

logger = logging.getLogger(__name__)

ClampHook = Callable[[int, np.ndarray], None]


@dataclass
class SkipFeature:
    level: int
    map: Tensor  # [C, H, W] or [N, C, H, W]

    @property
    def channels(self) -> int:
        return self.map.shape[-3]


class CrossAttentionFusionBlock(Module):
    def __init__(self, level: int, channels: int, cfg: FusionConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        d = cfg.embed_dim
        self.level = level
        self.in_dim = channels * cfg.patch_size**2
        self.patch_proj = Linear(self.in_dim, d, rng, dtype=dtype)
        self.query = Linear(d, d, rng, dtype=dtype)
        self.key = Linear(d, d, rng, dtype=dtype)
        self.value = Linear(d, d, rng, dtype=dtype)
        self.norm = LayerNorm(d, dtype=dtype)


class FilmBlock(Module):
    """Predicts per-channel (gamma, beta) from a pooled descriptor; starts as the identity."""

    def __init__(self, level: int, embed_dim: int, channels: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.level = level
        self.channels = channels
        self.gamma = Linear(embed_dim, channels, rng, dtype=dtype)
        self.beta = Linear(embed_dim, channels, rng, dtype=dtype)
        self.gamma.weight.data[...] = 0
        self.gamma.bias.data[...] = 1
        self.beta.weight.data[...] = 0
        self.beta.bias.data[...] = 0


def patchify_skip(skip: SkipFeature | Tensor, p: int) -> Tensor:
    """``[C, H, W] -> [N_k, C p^2]`` (batched: ``[B, N_k, C p^2]``), raster order, channel-major rows."""
    m = skip.map if isinstance(skip, SkipFeature) else skip
    return ops.unfold_patches(m, p)


def project_patches(patches: Tensor, block: CrossAttentionFusionBlock) -> Tensor:
    if patches.shape[-1] != block.in_dim:
        raise DimensionError(
            f"level {block.level}: patch width {patches.shape[-1]} != projection input {block.in_dim}"
        )
    return block.patch_proj(patches)


def fuse_cross_attention(
    v: Tensor,
    e: Tensor,
    block: CrossAttentionFusionBlock,
    out_proj: Linear,
    cfg: FusionConfig,
    hook: Optional[ClampHook] = None,
) -> Tensor:
    """Inject projected skip patches ``e`` into the vision embedding ``v``; returns the same shape as ``v``."""
    d = cfg.embed_dim
    if v.shape[-1] != d or e.shape[-1] != d:
        raise DimensionError(f"fusion width {d}: vision {v.shape}, patches {e.shape}")
    if v.ndim != e.ndim or v.shape[:-2] != e.shape[:-2]:
        raise DimensionError(f"vision {v.shape} and patches {e.shape} disagree on batch axes")

    q = block.query(ops.l2_normalize_rows(v))
    k = block.key(ops.l2_normalize_rows(e))
    values = block.value(e)
    weights = ops.softmax_rows(ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(d)))
    attended = ops.matmul(weights, values)

    scaled = ops.scale(ops.l2_normalize_rows(attended), cfg.alpha)
    clamped = ops.clamp(scaled, cfg.clamp_lo, cfg.clamp_hi)
    if hook is not None:
        hook(block.level, clamped.data)
    injected = block.norm(out_proj(clamped))
    return ops.add(v, injected)


def pool_hidden_descriptor(h: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean of unit-normalized rows: ``[T, d] -> [d]`` (batched ``[B, T, d] -> [B, d]``)."""
    if h.ndim < 2 or h.shape[-2] == 0:
        raise DimensionError(f"cannot pool an empty sequence of shape {h.shape}")
    return ops.mean_rows(ops.l2_normalize_rows(h), weights)


def film_modulate(skip: SkipFeature, hbar: Tensor, film: FilmBlock) -> SkipFeature:
    if film.level != skip.level:
        raise ConfigError(f"FiLM block for level {film.level} applied to skip level {skip.level}")
    if skip.channels != film.channels:
        raise DimensionError(f"level {skip.level}: skip has {skip.channels} channels, FiLM emits {film.channels}")
    m = skip.map
    unbatched = m.ndim == 3
    if unbatched:
        m = ops.reshape(m, (1,) + m.shape)
        hbar = ops.reshape(hbar, (1,) + hbar.shape)
    if hbar.shape[0] != m.shape[0]:
        raise DimensionError(f"descriptor batch {hbar.shape[0]} != skip batch {m.shape[0]}")
    out = ops.channel_affine(m, film.gamma(hbar), film.beta(hbar))
    if unbatched:
        out = ops.reshape(out, out.shape[1:])
    return SkipFeature(skip.level, out)


class FusionStack(Module):
    """All fusion parameters of one model: per-level blocks plus the shared output projection."""

    def __init__(self, cfg: FusionConfig, skip_channels: list[int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.cross = ModuleDict(
            {str(k): CrossAttentionFusionBlock(k, c, cfg, rng, dtype) for k, c in enumerate(skip_channels, start=1)}
        )
        self.out_proj = Linear(cfg.embed_dim, cfg.embed_dim, rng, dtype=dtype)
        self.film = ModuleDict(
            {str(k): FilmBlock(k, cfg.embed_dim, c, rng, dtype) for k, c in enumerate(skip_channels, start=1)}
        )

    def cross_parameters(self):
        return self.cross.parameters() + self.out_proj.parameters()

    def film_parameters(self):
        return self.film.parameters()

    def zero_injection_(self):
        """Zero the shared projection and reset every norm to (1, 0) so fusion adds nothing."""
        self.out_proj.weight.data[...] = 0
        self.out_proj.bias.data[...] = 0
        for block in self.cross.values():
            block.norm.weight.data[...] = 1
            block.norm.bias.data[...] = 0

    def fused_vision_inputs(
        self, v: Tensor, skips: list[SkipFeature], hook: Optional[ClampHook] = None
    ) -> dict[int, Tensor]:
        """Fused vision embedding for every cross-attention layer named in ``level_to_layer``."""
        fused = {}
        for skip in skips:
            block = self.cross[skip.level]
            e = project_patches(patchify_skip(skip, self.cfg.patch_size), block)
            fused[self.cfg.level_to_layer[skip.level]] = fuse_cross_attention(
                v, e, block, self.out_proj, self.cfg, hook
            )
        return fused

    def modulate_skips(
        self,
        skips: list[SkipFeature],
        hidden: dict[int, Tensor],
        weights: Optional[np.ndarray] = None,
    ) -> list[SkipFeature]:
        out = []
        for skip in skips:
            layer = self.cfg.film_layers[skip.level]
            if layer not in hidden:
                raise ConfigError(f"no hidden state exposed for cross-attention layer {layer}")
            hbar = pool_hidden_descriptor(hidden[layer], weights)
            out.append(film_modulate(skip, hbar, self.film[skip.level]))
        return out
