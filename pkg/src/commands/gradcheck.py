import logging
import time

import numpy as np

from ..config import RunConfig
from ..data.prompts import vocabulary_seed_texts
from ..data.synthetic import generate_synthetic
from ..minivlm import TokenBatch, TokenSequence, lm_loss
from ..model import MDFModel
from ..tensor import Tensor
from ..tensor.gradcheck import GroupResult, check_module
from ..trainer import total_loss
from ..unet import seg_loss
from ..vocab import Vocabulary
from .base import EXIT_FAILURE, EXIT_OK, CommandRouter, arg, banner, resolve_config

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["gradcheck"])

TOL_F32 = 1e-3
TOL_F64 = 1e-5


def perturb_(model: MDFModel, rng: np.random.Generator, scale: float = 0.05):
    """Move FiLM away from its identity initialization so every fusion path carries gradient."""
    for p in model.fusion.film_parameters():
        p.data += rng.normal(0.0, scale, p.shape).astype(p.dtype)


def check_fused_gradients(
    cfg: RunConfig,
    coords_per_tensor: int = 2,
    batch_size: int = 2,
    seed: int = 0,
) -> dict[str, GroupResult]:
    """Finite-difference check of every parameter of the fused model on one synthetic batch."""
    vocab = Vocabulary.build(vocabulary_seed_texts())
    model = MDFModel(cfg, len(vocab), seed=cfg.seed)
    rng = np.random.default_rng(seed)
    perturb_(model, rng)
    model.train()

    samples = generate_synthetic(batch_size, image_size=cfg.unet.image_size, seed=cfg.seed)
    images = np.stack([s.image_tensor(cfg.unet.image_size) for s in samples]).astype(np.float64)
    masks = np.stack([s.mask_tensor(cfg.unet.image_size) for s in samples]).astype(np.float64)
    batch = TokenBatch.from_sequences([TokenSequence.from_text(vocab, s.prompt, s.reference) for s in samples])

    def loss_fn(dtype):
        out = model.forward_fused(Tensor(images.astype(dtype)), batch)
        return total_loss(seg_loss(out.probs, masks.astype(dtype)), lm_loss(out.logits, batch))

    return check_module(model, loss_fn, MDFModel.check_group_of, rng, coords_per_tensor=coords_per_tensor)


@router.command(
    "gradcheck",
    help="Compare analytic and finite-difference gradients for every parameter group of the fused model",
    arguments=[
        arg("--coords", type=int, default=2, help="Sampled coordinates per parameter tensor (default: 2)"),
        arg("--batch", type=int, default=2, help="Synthetic samples in the checked batch (default: 2)"),
    ],
)
def cmd_gradcheck(args) -> int:
    cfg = resolve_config(args)
    started = time.perf_counter()
    results = check_fused_gradients(cfg, args.coords, args.batch)
    elapsed = time.perf_counter() - started

    lines = [f"{'group':<14}{'tensors':>8}{'coords':>8}{'rel err f32':>14}{'rel err f64':>14}  status"]
    ok = True
    for name in sorted(results):
        r = results[name]
        passed = r.passed(TOL_F32, TOL_F64)
        ok &= passed
        lines.append(
            f"{name:<14}{r.tensors:>8}{r.coordinates:>8}{r.error_f32:>14.3e}{r.error_f64:>14.3e}  {'ok' if passed else 'FAIL'}"
        )
        if not passed:
            lines.append(f"  worst tensor: {r.worst_tensor} ({r.worst_tensor_error:.3e})")
    lines.append(f"Tolerances: f32 < {TOL_F32:g}, f64 < {TOL_F64:g}; {elapsed:.1f}s")
    banner("GRADIENT CHECK", lines)
    return EXIT_OK if ok else EXIT_FAILURE
