"""Run configuration: one JSON file, validated before any work starts."""

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .settings import settings


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class UNetConfig(_Section):
    in_channels: int = Field(3, ge=1, description="Image channels fed to the U-Net")
    image_size: int = Field(64, description="Square input side in pixels; divisible by 16")
    widths: list[int] = Field([16, 32, 64, 128], description="Channel width of the four encoder levels")
    bridge_width: int = Field(256, ge=1, description="Channel width of the bridge below level 4")
    residual_depth: int = Field(3, ge=1, description="conv-batchnorm sub-blocks per residual block")

    @model_validator(mode="after")
    def _check_pyramid(self):
        if self.image_size <= 0 or self.image_size % 16:
            raise ValueError(f"image_size {self.image_size} must be a positive multiple of 16")
        if len(self.widths) != 4:
            raise ValueError("widths must list exactly four levels")
        for lo, hi in zip(self.widths, self.widths[1:]):
            if hi != 2 * lo:
                raise ValueError(f"each level must double its channels, got {self.widths}")
        return self


class VlmConfig(_Section):
    embed_dim: int = Field(64, ge=1, description="Model width d of vision embeddings and decoder states")
    heads: int = Field(4, ge=1, description="Attention heads in decoder and vision blocks")
    layers: int = Field(8, ge=1, description="Decoder layer count L")
    cross_layers: list[int] = Field([1, 3, 5, 7], description="Decoder indices that are cross-attention layers")
    vision_layers: int = Field(2, ge=0, description="Non-causal transformer blocks in the vision encoder")
    patch_size: int = Field(16, ge=1, description="Vision patch side in pixels")
    mlp_ratio: int = Field(4, ge=1, description="MLP hidden width as a multiple of embed_dim")
    max_seq_len: int = Field(96, ge=2, description="Longest token sequence (prompt + response)")
    vocab_size: Optional[int] = Field(None, description="Filled from the vocabulary file when left empty")

    @model_validator(mode="after")
    def _check_topology(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        bad = [i for i in self.cross_layers if not 0 <= i < self.layers]
        if bad:
            raise ValueError(f"cross_layers {bad} fall outside [0, {self.layers})")
        if len(set(self.cross_layers)) != len(self.cross_layers):
            raise ValueError("cross_layers contains duplicates")
        return self


class FusionConfig(_Section):
    patch_size: int = Field(4, ge=1, description="Skip-feature patch side p")
    alpha: float = Field(0.1, description="Injection strength applied to the normalized attention output")
    clamp_lo: float = Field(-5.0, description="Lower clamp bound before the shared output projection")
    clamp_hi: float = Field(5.0, description="Upper clamp bound before the shared output projection")
    embed_dim: int = Field(64, ge=1, description="Fusion width; must equal vlm.embed_dim")
    level_to_layer: dict[int, int] = Field(
        {1: 1, 2: 3, 3: 5, 4: 7}, description="Skip level -> decoder cross-attention layer it feeds"
    )
    film_source_layers: Optional[dict[int, int]] = Field(
        None, description="Skip level -> cross-attention layer whose hidden state drives FiLM (default: level_to_layer)"
    )

    @model_validator(mode="after")
    def _check_fusion(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError(f"clamp range ({self.clamp_lo}, {self.clamp_hi}) is empty")
        if sorted(self.level_to_layer) != [1, 2, 3, 4]:
            raise ValueError("level_to_layer must map exactly the levels 1..4")
        if len(set(self.level_to_layer.values())) != len(self.level_to_layer):
            raise ValueError("level_to_layer must be injective")
        if self.film_source_layers is not None and sorted(self.film_source_layers) != [1, 2, 3, 4]:
            raise ValueError("film_source_layers must map exactly the levels 1..4")
        return self

    @property
    def film_layers(self) -> dict[int, int]:
        return self.film_source_layers or self.level_to_layer


class SyntheticConfig(_Section):
    n: int = Field(400, gt=0, description="Number of synthetic samples")
    image_size: int = Field(64, ge=16, description="Side of generated images in pixels")
    difficulty: float = Field(0.5, ge=0.0, le=1.0, description="0 = loud pigment speckles, 1 = barely visible")
    coarse_cue_rate: float = Field(1.0, ge=0.0, le=1.0, description="Fraction of acquired images with the disc-rim cue")
    metadata_rate: float = Field(1.0, ge=0.0, le=1.0, description="Fraction of inherited samples with a metadata prompt")


class SplitSpec(_Section):
    train: float = Field(0.7, ge=0.0, le=1.0, description="Train fraction")
    val: float = Field(0.1, ge=0.0, le=1.0, description="Validation fraction")
    test: float = Field(0.2, ge=0.0, le=1.0, description="Test fraction")

    @model_validator(mode="after")
    def _check_sum(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {self.train + self.val + self.test}, not 1")
        return self


class TrainConfig(_Section):
    epochs: int = Field(60, gt=0, description="Epochs per training stage")
    batch_size: int = Field(2, gt=0, description="Samples per optimizer step")
    lr: float = Field(1e-6, gt=0, description="Initial learning rate of the MLLM group (StepLR applies)")
    unet_lr: Optional[float] = Field(None, gt=0, description="Constant learning rate of the U-Net group (default: lr)")
    step_size: int = Field(1, gt=0, description="StepLR period in epochs")
    gamma: float = Field(0.85, gt=0.0, le=1.0, description="StepLR decay factor")
    betas: tuple[float, float] = Field((0.9, 0.999), description="AdamW moment decay rates")
    eps: float = Field(1e-8, gt=0, description="AdamW denominator guard")
    weight_decay: float = Field(0.01, ge=0, description="AdamW decoupled weight decay")
    unet_frozen: bool = Field(False, description="Exclude the U-Net group from updates")
    mllm_frozen: bool = Field(False, description="Exclude the MLLM group from updates")
    checkpoint_dir: str = Field("checkpoints", description="Checkpoint directory, relative to out")
    max_new_tokens: int = Field(24, ge=0, description="Greedy generation budget during validation and eval")

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, v):
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas {v} must lie in [0, 1)")
        return v

    @property
    def unet_rate(self) -> float:
        return self.unet_lr if self.unet_lr is not None else self.lr


class PreprocessConfig(_Section):
    size: int = Field(512, gt=0, description="Square output side after resizing")
    threshold: int = Field(200, ge=0, le=255, description="Default grayscale threshold for watermark masks")
    radius: int = Field(3, ge=1, description="Inpainting neighbourhood radius in pixels")


class RunConfig(_Section):
    seed: int = Field(42, description="Seed for initialization, data generation and splitting")
    out: str = Field(settings.OUT_DIR, description="Root directory for every output")
    manifest: Optional[str] = Field(None, description="JSON-lines dataset manifest (default: <out>/data/manifest.jsonl)")
    unet: UNetConfig = Field(default_factory=UNetConfig)
    vlm: VlmConfig = Field(default_factory=VlmConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)

    @model_validator(mode="after")
    def _check_cross_section(self):
        if self.fusion.embed_dim != self.vlm.embed_dim:
            raise ValueError(f"fusion.embed_dim {self.fusion.embed_dim} != vlm.embed_dim {self.vlm.embed_dim}")
        cross = set(self.vlm.cross_layers)
        for name, mapping in (("level_to_layer", self.fusion.level_to_layer), ("film_source_layers", self.fusion.film_layers)):
            stray = sorted(set(mapping.values()) - cross)
            if stray:
                raise ValueError(f"fusion.{name} targets {stray}, which are not cross-attention layers")
        smallest = self.unet.image_size // 8
        if smallest % self.fusion.patch_size:
            raise ValueError(
                f"level-4 skip side {smallest} is not divisible by fusion.patch_size {self.fusion.patch_size}"
            )
        if self.unet.image_size % self.vlm.patch_size:
            raise ValueError(f"image_size {self.unet.image_size} is not divisible by vlm.patch_size")
        return self

    @property
    def out_path(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out_path / "data" / "manifest.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return self.out_path / self.train.checkpoint_dir

    def config_hash(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` assignments; values are parsed as JSON when possible."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {part} is not a section")
        node[parts[-1]] = _coerce(raw)
    return data


def build_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    path = Path(path or settings.CONFIG_PATH)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return build_config(apply_overrides(data, overrides or []))


def describe_keys(model: type[BaseModel] = RunConfig, prefix: str = "") -> list[tuple[str, str]]:
    """Flattened ``(dotted key, description)`` pairs for help output."""
    rows = []
    for name, info in model.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            rows.extend(describe_keys(annotation, f"{prefix}{name}."))
            continue
        default = info.get_default(call_default_factory=True)
        rows.append((f"{prefix}{name}", f"{info.description or ''} (default: {default!r})"))
    return rows
