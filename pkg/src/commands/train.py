import logging
from pathlib import Path
from typing import Optional

from ..config import RunConfig
from ..errors import StageError
from ..evaluator import compute_metrics, emit_report, evaluate_split
from ..model import FusionModelService
from ..trainer import TrainResult, Trainer, encode_samples, load_or_build_vocabulary, prepare_splits, run_tag
from .base import EXIT_OK, CommandRouter, arg, banner, resolve_config

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["train"])

# stage -> command that produces its checkpoint
PRODUCERS = {"unet": "pretrain-unet", "vlm": "pretrain-vlm"}


def _datasets(cfg: RunConfig):
    splits = prepare_splits(cfg)
    vocab = load_or_build_vocabulary(cfg, splits["train"])
    size = cfg.unet.image_size
    train_set = encode_samples(splits["train"], size, vocab)
    val_set = encode_samples(splits["val"], size, vocab)
    return splits, vocab, train_set, val_set


def _report(result: TrainResult, title: str):
    last = result.log.iloc[-1]
    lines = [
        f"Epochs:              {len(result.log)}",
        f"Final train loss:    {last['total_loss']:.4f}",
        f"Final val loss:      {last['val_total_loss']:.4f}",
        f"Best val-acc epoch:  {result.best_accuracy_epoch}",
        f"Best val-seg epoch:  {result.best_seg_epoch}",
        f"Best checkpoint:     {result.best_checkpoint}",
        f"Log:                 {result.summary_path.with_name(f'{result.tag}_log.csv')}",
    ]
    banner(title, lines)


def _pretrain(args, stage: str, title: str) -> int:
    cfg = resolve_config(args)
    _, vocab, train_set, val_set = _datasets(cfg)
    service = FusionModelService(cfg, vocab)
    banner(f"TRAINING {stage.upper()} STAGE")
    result = Trainer(service, stage).fit(train_set, val_set)
    _report(result, title)
    return EXIT_OK


@router.command("pretrain-unet", help="Train the standalone U-Net on segmentation loss")
def cmd_pretrain_unet(args) -> int:
    return _pretrain(args, "unet", "U-NET PRETRAINING COMPLETE")


@router.command("pretrain-vlm", help="Train the baseline vision-language model on language loss, without fusion")
def cmd_pretrain_vlm(args) -> int:
    return _pretrain(args, "vlm", "BASELINE VLM PRETRAINING COMPLETE")


def pretrained_checkpoint(cfg: RunConfig, stage: str, explicit: Optional[str]) -> Path:
    path = Path(explicit) if explicit else cfg.checkpoint_path / f"{stage}_best.npz"
    if not path.exists():
        raise StageError(f"missing {stage} checkpoint {path}; run `{PRODUCERS[stage]}` first or pass --from-scratch")
    return path


@router.command(
    "train-fused",
    help="Fine-tune the fused model, initialized from both pretrained checkpoints",
    arguments=[
        arg("--freeze-unet", action="store_true", help="Keep the pretrained U-Net fixed"),
        arg("--freeze-mllm", action="store_true", help="Keep the pretrained vision-language model fixed"),
        arg("--from-scratch", action="store_true", help="Start from random weights instead of the pretrained checkpoints"),
        arg("--unet-checkpoint", default=None, help="U-Net checkpoint (default: <out>/<checkpoint_dir>/unet_best.npz)"),
        arg("--vlm-checkpoint", default=None, help="Baseline checkpoint (default: <out>/<checkpoint_dir>/vlm_best.npz)"),
        arg("--eval-test", action="store_true", help="Evaluate the best checkpoint on the test split afterwards"),
    ],
)
def cmd_train_fused(args) -> int:
    cfg = resolve_config(args)
    cfg = cfg.model_copy(
        update={
            "train": cfg.train.model_copy(
                update={
                    "unet_frozen": cfg.train.unet_frozen or args.freeze_unet,
                    "mllm_frozen": cfg.train.mllm_frozen or args.freeze_mllm,
                }
            )
        }
    )
    if args.from_scratch and (cfg.train.unet_frozen or cfg.train.mllm_frozen):
        logger.warning("freezing randomly initialized components")

    # resolve both checkpoints before any work so a missing stage fails fast
    sources = {}
    if not args.from_scratch:
        sources["unet"] = pretrained_checkpoint(cfg, "unet", args.unet_checkpoint)
        sources["vlm"] = pretrained_checkpoint(cfg, "vlm", args.vlm_checkpoint)

    splits, vocab, train_set, val_set = _datasets(cfg)
    service = FusionModelService(cfg, vocab)
    for component, path in sources.items():
        service.load_component(path, component)

    tag = run_tag("fused", cfg.train.unet_frozen, cfg.train.mllm_frozen)
    banner(f"TRAINING FUSED MODEL ({tag})")
    result = Trainer(service, "fused").fit(train_set, val_set)
    _report(result, "FUSED TRAINING COMPLETE")

    if args.eval_test:
        best, _ = FusionModelService.load(result.best_checkpoint, cfg)
        records = evaluate_split(best, splits["test"], fused=True)
        report = compute_metrics(records)
        emit_report(report, cfg.out_path / "eval" / f"{tag}-test", records)
        banner("TEST SPLIT", [f"Accuracy:    {report.accuracy:.4f}", f"Samples:     {report.n}"])
    return EXIT_OK
