"""Three-stage training: U-Net pretraining, baseline VLM pretraining, fused fine-tuning."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import RunConfig
from .data.manifest import load_manifest
from .data.prompts import vocabulary_seed_texts
from .data.sample import Sample
from .data.splits import split
from .errors import DivergenceError, NumericError, SplitError, StageError
from .evaluator import compute_metrics, evaluate_split
from .minivlm import TokenBatch, TokenSequence, lm_loss
from .model import MLLM_GROUP, UNET_GROUP, FusionModelService, MDFModel
from .optim import AdamW, ParamGroup, step_lr
from .tensor import ComputationRecord, Tensor, no_grad
from .tensor import ops
from .unet import dice_score, seg_loss
from .vocab import Vocabulary

logger = logging.getLogger(__name__)

STAGES = ("unet", "vlm", "fused")
LOG_COLUMNS = [
    "epoch",
    "lr",
    "unet_lr",
    "seg_loss",
    "lm_loss",
    "total_loss",
    "val_seg_loss",
    "val_lm_loss",
    "val_total_loss",
    "val_dice",
    "val_accuracy",
]


def total_loss(seg: Tensor, lm: Tensor) -> Tensor:
    """Mean of the segmentation and language losses."""
    seg, lm = ops.as_tensor(seg), ops.as_tensor(lm)
    for name, value in (("seg", seg), ("lm", lm)):
        if not np.isfinite(value.data).all():
            raise NumericError(f"{name} loss is not finite: {value.data}")
    return ops.scale(ops.add(seg, lm), 0.5)


# ============================================================================
# Data
# ============================================================================
@dataclass
class EncodedSet:
    """Model-ready arrays for one split."""

    samples: list[Sample]
    images: np.ndarray  # [N, 3, S, S]
    masks: np.ndarray  # [N, 1, S, S]
    sequences: list[TokenSequence]  # prompt + reference, for teacher forcing
    prompts: list[TokenSequence] = field(repr=False)

    def __len__(self):
        return len(self.samples)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, TokenBatch]:
        idx = list(idx)
        return self.images[idx], self.masks[idx], TokenBatch.from_sequences([self.sequences[i] for i in idx])


def encode_samples(samples: list[Sample], image_size: int, vocab: Vocabulary) -> EncodedSet:
    if not samples:
        raise SplitError("cannot encode an empty split")
    return EncodedSet(
        samples=samples,
        images=np.stack([s.image_tensor(image_size) for s in samples]),
        masks=np.stack([s.mask_tensor(image_size) for s in samples]),
        sequences=[TokenSequence.from_text(vocab, s.prompt, s.reference) for s in samples],
        prompts=[TokenSequence.from_text(vocab, s.prompt) for s in samples],
    )


def build_vocabulary(samples: list[Sample]) -> Vocabulary:
    texts = [t for s in samples for t in (s.prompt, s.reference)]
    return Vocabulary.build(texts + vocabulary_seed_texts())


def prepare_splits(cfg: RunConfig) -> dict[str, list[Sample]]:
    samples = load_manifest(cfg.manifest_path)
    train, val, test = split(samples, cfg.split, cfg.seed)
    return {"train": train, "val": val, "test": test}


def load_or_build_vocabulary(cfg: RunConfig, train: list[Sample]) -> Vocabulary:
    """The vocabulary file under ``out`` is shared by every stage of a run."""
    path = cfg.out_path / "vocab.txt"
    if path.exists():
        return Vocabulary.load(path)
    vocab = build_vocabulary(train)
    vocab.save(path)
    logger.info("built vocabulary of %d tokens at %s", len(vocab), path)
    return vocab


# ============================================================================
# Trainer
# ============================================================================
def run_tag(stage: str, unet_frozen: bool = False, mllm_frozen: bool = False) -> str:
    if stage != "fused":
        return stage
    frozen = [name for name, flag in (("unet", unet_frozen), ("mllm", mllm_frozen)) if flag]
    return "fused" if not frozen else "fused-frozen-" + "-".join(frozen)


@dataclass
class StepLosses:
    """Losses of one batch; terms the stage does not use are ``None``."""

    seg: Optional[Tensor]
    lm: Optional[Tensor]
    total: Tensor
    probs: Optional[Tensor] = None

    def values(self) -> tuple[float, float, float]:
        return (
            self.seg.item() if self.seg is not None else math.nan,
            self.lm.item() if self.lm is not None else math.nan,
            self.total.item(),
        )


@dataclass
class TrainResult:
    tag: str
    log: pd.DataFrame
    best_accuracy_epoch: Optional[int]
    best_seg_epoch: Optional[int]
    best_checkpoint: Path
    last_checkpoint: Path
    summary_path: Path


class Trainer:
    """Runs one stage over a model bundle, keeping the per-epoch log and the best checkpoint."""

    def __init__(self, service: FusionModelService, stage: str, cfg: Optional[RunConfig] = None, progress: bool = True):
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
        self.service = service
        self.model: MDFModel = service.model
        self.cfg = cfg or service.cfg
        self.stage = stage
        self.progress = progress
        tc = self.cfg.train
        self.unet_trains = stage == "unet" or (stage == "fused" and not tc.unet_frozen)
        self.vlm_trains = stage == "vlm" or (stage == "fused" and not tc.mllm_frozen)
        self.tag = run_tag(stage, tc.unet_frozen, tc.mllm_frozen)
        self.optimizer = self.build_optimizer()

    # ------------------------------------------------------------------
    # Parameter groups
    # ------------------------------------------------------------------
    def _trainable(self, name: str) -> bool:
        if name.startswith("unet."):
            return self.unet_trains
        if name.startswith("vlm."):
            return self.vlm_trains
        return self.stage == "fused"

    def build_optimizer(self) -> AdamW:
        tc = self.cfg.train
        groups = {UNET_GROUP: {}, MLLM_GROUP: {}}
        for name, p in self.model.named_parameters():
            p.requires_grad = self._trainable(name)
            if p.requires_grad:
                groups[MDFModel.group_of(name)][name] = p
        if not any(groups.values()):
            raise StageError(f"stage {self.tag} has nothing to train")
        return AdamW(
            [
                ParamGroup(UNET_GROUP, groups[UNET_GROUP], tc.unet_rate, scheduled=False),
                ParamGroup(MLLM_GROUP, groups[MLLM_GROUP], tc.lr, scheduled=True),
            ],
            betas=tc.betas,
            eps=tc.eps,
            weight_decay=tc.weight_decay,
        )

    def learning_rates(self, epoch: int) -> dict[str, float]:
        tc = self.cfg.train
        return {UNET_GROUP: tc.unet_rate, MLLM_GROUP: step_lr(epoch, tc.lr, tc.step_size, tc.gamma)}

    def _set_modes(self):
        self.model.train()
        if not self.unet_trains:
            self.model.unet.eval()
        if not self.vlm_trains:
            self.model.vlm.eval()

    # ------------------------------------------------------------------
    # Losses
    # ------------------------------------------------------------------
    def losses(self, images: np.ndarray, masks: np.ndarray, batch: TokenBatch) -> StepLosses:
        x = Tensor(images)
        if self.stage == "unet":
            probs = self.model.segment(x).probs
            seg = seg_loss(probs, masks)
            return StepLosses(seg, None, seg, probs)
        if self.stage == "vlm":
            lm = lm_loss(self.model.baseline(x, batch.inputs()).logits, batch)
            return StepLosses(None, lm, lm)
        out = self.model.forward_fused(x, batch)
        seg = seg_loss(out.probs, masks)
        lm = lm_loss(out.logits, batch)
        return StepLosses(seg, lm, total_loss(seg, lm), out.probs)

    # ------------------------------------------------------------------
    # Epochs
    # ------------------------------------------------------------------
    def train_epoch(self, data: EncodedSet, epoch: int) -> dict[str, float]:
        self._set_modes()
        lrs = self.learning_rates(epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(data))
        bs = self.cfg.train.batch_size
        sums = {"seg_loss": 0.0, "lm_loss": 0.0, "total_loss": 0.0}
        steps = 0
        batches = range(0, len(data), bs)
        for b, start in enumerate(tqdm(batches, desc=f"{self.tag} epoch {epoch}", leave=False, disable=not self.progress)):
            images, masks, batch = data.batch(order[start : start + bs])
            try:
                with ComputationRecord() as record:
                    step = self.losses(images, masks, batch)
                    if not np.isfinite(step.total.data).all():
                        raise NumericError(f"total loss {step.total.item()}")
                    record.backward(step.total)
            except NumericError as e:
                raise DivergenceError(f"{self.tag}: epoch {epoch}, batch {b}: {e}") from e
            self.optimizer.step(lrs)
            self.optimizer.zero_grad()
            for key, value in zip(sums, step.values()):
                sums[key] += value
            steps += 1
        return {k: v / steps for k, v in sums.items()}

    def validate(self, data: EncodedSet) -> dict[str, float]:
        self.model.eval()
        bs = self.cfg.train.batch_size
        sums = {"val_seg_loss": 0.0, "val_lm_loss": 0.0, "val_total_loss": 0.0}
        dice = []
        with no_grad():
            for start in range(0, len(data), bs):
                idx = range(start, min(start + bs, len(data)))
                images, masks, batch = data.batch(idx)
                step = self.losses(images, masks, batch)
                for key, value in zip(sums, step.values()):
                    sums[key] += value * len(idx)
                if step.probs is not None:
                    dice.append(dice_score(step.probs.data, masks) * len(idx))
        metrics = {k: v / len(data) for k, v in sums.items()}
        metrics["val_dice"] = sum(dice) / len(data) if dice else math.nan
        if self.stage == "unet":
            metrics["val_accuracy"] = math.nan
        else:
            records = evaluate_split(self.service, data.samples, fused=self.stage == "fused", progress=False)
            metrics["val_accuracy"] = compute_metrics(records).accuracy
        return metrics

    # ------------------------------------------------------------------
    # Fit
    # ------------------------------------------------------------------
    def fit(self, train: EncodedSet, val: EncodedSet) -> TrainResult:
        if len(train) == 0 or len(val) == 0:
            raise SplitError("training and validation splits must be non-empty")
        ckpt_dir = self.cfg.checkpoint_path
        best_path = ckpt_dir / f"{self.tag}_best.npz"
        last_path = ckpt_dir / f"{self.tag}_last.npz"
        rows = []
        best_acc, best_acc_epoch = -math.inf, None
        best_seg, best_seg_epoch = math.inf, None

        logger.info("training stage %s for %d epochs on %d samples", self.tag, self.cfg.train.epochs, len(train))
        for epoch in range(self.cfg.train.epochs):
            lrs = self.learning_rates(epoch)
            row = {"epoch": epoch, "lr": lrs[UNET_GROUP if self.stage == "unet" else MLLM_GROUP], "unet_lr": lrs[UNET_GROUP]}
            row.update(self.train_epoch(train, epoch))
            row.update(self.validate(val))
            rows.append(row)
            logger.info(
                "%s epoch %d: loss %.4f, val loss %.4f, val accuracy %s",
                self.tag,
                epoch,
                row["total_loss"],
                row["val_total_loss"],
                "n/a" if math.isnan(row["val_accuracy"]) else f"{row['val_accuracy']:.4f}",
            )

            improved = False
            # strict comparisons keep the earlier epoch on ties
            if not math.isnan(row["val_accuracy"]) and row["val_accuracy"] > best_acc:
                best_acc, best_acc_epoch = row["val_accuracy"], epoch
                improved = self.stage != "unet"
            if not math.isnan(row["val_seg_loss"]) and row["val_seg_loss"] < best_seg:
                best_seg, best_seg_epoch = row["val_seg_loss"], epoch
                improved = improved or self.stage == "unet"
            if improved:
                self.service.save_checkpoint(best_path, self.tag, epoch, self.optimizer, _finite(row))

        self.service.save_checkpoint(last_path, self.tag, self.cfg.train.epochs - 1, self.optimizer, _finite(rows[-1]))
        log = pd.DataFrame(rows, columns=LOG_COLUMNS)
        log_path = self.cfg.out_path / f"{self.tag}_log.csv"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)

        summary = {
            "stage": self.stage,
            "tag": self.tag,
            "epochs": self.cfg.train.epochs,
            "best_accuracy_epoch": best_acc_epoch,
            "best_val_accuracy": None if best_acc_epoch is None else best_acc,
            "best_seg_epoch": best_seg_epoch,
            "best_val_seg_loss": None if best_seg_epoch is None else best_seg,
            "best_checkpoint": str(best_path),
            "last_checkpoint": str(last_path),
            "config_hash": self.cfg.config_hash(),
        }
        summary_path = self.cfg.out_path / f"{self.tag}_summary.json"
        summary_path.write_text(json.dumps(summary, indent=2) + "\n")
        return TrainResult(self.tag, log, best_acc_epoch, best_seg_epoch, best_path, last_path, summary_path)


def _finite(row: dict) -> dict[str, Optional[float]]:
    return {k: (None if isinstance(v, float) and math.isnan(v) else float(v)) for k, v in row.items()}
