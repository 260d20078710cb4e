import logging
from pathlib import Path

from ..config import apply_overrides, build_config
from ..errors import StageError
from ..evaluator import compute_metrics, emit_report, evaluate_split
from ..model import FusionModelService, read_checkpoint
from ..trainer import prepare_splits
from .base import EXIT_OK, CommandRouter, arg, banner

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["eval"])


def _fmt(value) -> str:
    return value if isinstance(value, str) else f"{value:.2f}"


@router.command(
    "eval",
    help="Generate answers for one split with a checkpoint and write metrics.json, confusion.csv and predictions.csv. "
    "The run configuration is read from the checkpoint; --set still applies and --out names the report directory.",
    arguments=[
        arg("--checkpoint", required=True, help="Checkpoint written by pretrain-vlm or train-fused"),
        arg("--split", choices=["train", "val", "test"], default="test", help="Split to evaluate (default: test)"),
    ],
)
def cmd_eval(args) -> int:
    meta, _ = read_checkpoint(args.checkpoint)
    if meta.stage == "unet":
        raise StageError("a U-Net checkpoint produces no text; evaluate a pretrain-vlm or train-fused checkpoint")
    cfg = build_config(apply_overrides(dict(meta.config), args.overrides))
    service, meta = FusionModelService.load(args.checkpoint, cfg)
    fused = meta.stage.startswith("fused")

    samples = prepare_splits(cfg)[args.split]
    records = evaluate_split(service, samples, fused=fused)
    report = compute_metrics(records)
    out_dir = Path(args.out) if args.out else cfg.out_path / "eval" / f"{Path(args.checkpoint).stem}-{args.split}"
    paths = emit_report(report, out_dir, records)

    lines = [f"Checkpoint:  {args.checkpoint} ({meta.stage}, epoch {meta.epoch})", f"Split:       {args.split} ({report.n} samples)"]
    lines.append(f"Accuracy:    {report.accuracy:.4f}")
    for name, m in report.categories.items():
        lines.append(f"  {name:<10} P {_fmt(m.precision):>5}  R {_fmt(m.recall):>5}  F1 {m.f1:.2f}")
    lines.append(f"Report:      {paths['metrics'].parent}")
    banner("EVALUATION", lines)
    return EXIT_OK
