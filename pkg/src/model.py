"""The fused model bundle and its checkpoint service."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from .config import RunConfig
from .errors import CheckpointError
from .fusion import ClampHook, FusionStack, SkipFeature
from .minivlm import DecoderOutput, MiniVLM, TokenBatch, TokenSequence
from .optim import AdamW
from .settings import settings
from .tensor import Module, Tensor, no_grad
from .unet import UNet, UNetOutput
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

UNET_GROUP, MLLM_GROUP = "unet", "mllm"


@dataclass
class FusedOutput:
    probs: Tensor  # [B, 1, H, W]
    logits: Tensor  # [B, T, V]
    skips: list[SkipFeature]
    modulated: list[SkipFeature]
    hidden: dict[int, Tensor]


class MDFModel(Module):
    """U-Net, mini VLM and the fusion stack that couples them."""

    def __init__(self, cfg: RunConfig, vocab_size: int, seed: Optional[int] = None, dtype=np.float32):
        super().__init__()
        seed = cfg.seed if seed is None else seed
        self.unet = UNet(cfg.unet, np.random.default_rng([seed, 1]), dtype)
        self.vlm = MiniVLM(
            cfg.vlm.model_copy(update={"vocab_size": vocab_size}),
            cfg.unet.in_channels,
            cfg.unet.image_size,
            np.random.default_rng([seed, 2]),
            dtype,
        )
        self.fusion = FusionStack(cfg.fusion, self.unet.skip_channels, np.random.default_rng([seed, 3]), dtype)

    @staticmethod
    def group_of(name: str) -> str:
        """Optimizer group: FiLM travels with the U-Net, cross-attention fusion with the MLLM."""
        if name.startswith("unet.") or name.startswith("fusion.film."):
            return UNET_GROUP
        return MLLM_GROUP

    @staticmethod
    def check_group_of(name: str) -> str:
        if name.startswith("fusion.film."):
            return "fusion-film"
        if name.startswith("fusion."):
            return "fusion-cross"
        return UNET_GROUP if name.startswith("unet.") else MLLM_GROUP

    def segment(self, images) -> UNetOutput:
        return self.unet(images)

    def baseline(self, images, ids: np.ndarray) -> DecoderOutput:
        return self.vlm.decode_forward(ids, self.vlm.encode_vision(images))

    def forward_fused(self, images, batch: TokenBatch, hook: Optional[ClampHook] = None) -> FusedOutput:
        bridge, skips = self.unet.encode(images)
        vision = self.vlm.encode_vision(images)
        fused = self.fusion.fused_vision_inputs(vision, skips, hook)
        out = self.vlm.decode_forward(batch.inputs(), vision, fused)
        modulated = self.fusion.modulate_skips(skips, out.hidden, batch.prompt_weights())
        probs = self.unet.decode(bridge, modulated)
        return FusedOutput(probs, out.logits, skips, modulated, out.hidden)

    def generate(self, image: np.ndarray, prompt: TokenSequence, vocab: Vocabulary, fused: bool, max_new: int) -> str:
        """Greedy answer for one ``[C, H, W]`` image."""
        with no_grad():
            images = Tensor(image[None])
            vision = self.vlm.encode_vision(images)
            fusion_inputs = None
            if fused:
                _, skips = self.unet.encode(images)
                fusion_inputs = self.fusion.fused_vision_inputs(vision, skips)
            return self.vlm.generate(prompt, vision, fusion_inputs, max_new, vocab)


class CheckpointMeta(BaseModel):
    format_version: int
    stage: str
    epoch: int
    config_hash: str
    config: dict
    vocabulary: list[str]
    optimizer_steps: dict[str, int] = Field(default_factory=dict)
    metrics: dict[str, Optional[float]] = Field(default_factory=dict)


def _subtree(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for key, value in arrays.items():
        kind, _, name = key.partition("/")
        if kind in ("param", "buffer") and name.startswith(prefix + "."):
            out[f"{kind}/{name[len(prefix) + 1:]}"] = value
    return out


def read_checkpoint(path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = CheckpointMeta.model_validate(json.loads(str(z["__meta__"])))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if meta.format_version != settings.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.format_version}, expected {settings.CHECKPOINT_FORMAT_VERSION}"
        )
    return meta, arrays


class FusionModelService:
    """Owns a model with its configuration and vocabulary; saves and restores checkpoints."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary, model: Optional[MDFModel] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.model = model if model is not None else MDFModel(cfg, len(vocab))

    def save_checkpoint(
        self,
        path,
        stage: str,
        epoch: int,
        optimizer: Optional[AdamW] = None,
        metrics: Optional[dict[str, Optional[float]]] = None,
    ) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = dict(self.model.state_dict())
        if optimizer is not None:
            arrays.update(optimizer.state_dict())
        meta = CheckpointMeta(
            format_version=settings.CHECKPOINT_FORMAT_VERSION,
            stage=stage,
            epoch=epoch,
            config_hash=self.cfg.config_hash(),
            config=self.cfg.model_dump(mode="json"),
            vocabulary=self.vocab.tokens,
            optimizer_steps=optimizer.steps() if optimizer is not None else {},
            metrics=metrics or {},
        )
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.array(meta.model_dump_json()), **arrays)
        logger.info("saved %s checkpoint (epoch %d) to %s", stage, epoch, path)
        return path

    @classmethod
    def load(cls, path, cfg: Optional[RunConfig] = None) -> tuple["FusionModelService", CheckpointMeta]:
        """Rebuild the model from a checkpoint; ``cfg`` defaults to the stored configuration."""
        meta, arrays = read_checkpoint(path)
        if cfg is None:
            cfg = RunConfig.model_validate(meta.config)
        elif cfg.config_hash() != meta.config_hash:
            logger.warning("%s was written under a different configuration", path)
        service = cls(cfg, Vocabulary(meta.vocabulary))
        service.model.load_state_dict(arrays)
        return service, meta

    def load_component(self, path, component: str) -> CheckpointMeta:
        """Copy one sub-module (``unet`` or ``vlm``) from a checkpoint into the current model."""
        meta, arrays = read_checkpoint(path)
        if component == "vlm" and meta.vocabulary != self.vocab.tokens:
            raise CheckpointError(f"{path}: vocabulary differs from the current one")
        getattr(self.model, component).load_state_dict(_subtree(arrays, component))
        logger.info("initialized %s from %s (stage %s, epoch %d)", component, path, meta.stage, meta.epoch)
        return meta

    def load_optimizer(self, path, optimizer: AdamW):
        meta, arrays = read_checkpoint(path)
        optimizer.load_state_dict(arrays, meta.optimizer_steps)
