"""Procedural fundus-like images with vessel masks and templated clinical text.

Every image has an optic disc and a branching vessel tree grown by random
walks out of the disc; the mask is the union of both. Acquired samples carry
a coarse cue (a brightened rim around the disc), inherited samples only a
fine one (small pigment speckles next to the vessels), so the classes are
separable from fine detail but hard to tell apart with coarse patches.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw
from tqdm import tqdm

from ..config import SyntheticConfig
from ..preprocess import write_mask, write_png
from .diseases import DISEASE_TABLE, Category, DiseaseTable
from .prompts import build_prompt, reference_text
from .sample import PatientMetadata, Sample

logger = logging.getLogger(__name__)

FUNDUS_RGB = np.array([196.0, 92.0, 52.0])
VESSEL_RGB = (122, 30, 22)
DISC_RGB = (250, 222, 160)
PIGMENT_RGB = np.array([34.0, 22.0, 14.0])
ACUITIES = ("20/20", "20/25", "20/40", "20/70", "20/200", "10/180", "20/400")


def _grow_vessels(rng: np.random.Generator, size: int, center: tuple[float, float], fundus_r: float):
    """Line segments ``(start, end, width)`` of a branching random-walk tree rooted at ``center``."""
    segments = []
    step = max(size * 0.035, 1.5)
    trunks = [rng.uniform(0, 2 * np.pi) + k * np.pi / 2 for k in range(4)]
    stack = [(center, angle, 3 if size >= 64 else 2, 0) for angle in trunks]
    c0 = size / 2.0
    while stack:
        start, angle, width, depth = stack.pop()
        pos = start
        for n in range(int(rng.integers(8, 16))):
            angle += rng.normal(0.0, 0.25)
            nxt = (pos[0] + step * np.cos(angle), pos[1] + step * np.sin(angle))
            if np.hypot(nxt[0] - c0, nxt[1] - c0) > fundus_r - 2:
                break
            segments.append((pos, nxt, width))
            pos = nxt
            if depth < 3 and n > 2 and rng.random() < 0.18:
                stack.append((pos, angle + rng.choice([-1, 1]) * rng.uniform(0.4, 0.9), max(width - 1, 1), depth + 1))
            if n % 5 == 4 and width > 1:
                width -= 1
    return segments


def draw_fundus(
    rng: np.random.Generator,
    size: int,
    category: Category,
    difficulty: float,
    coarse_cue: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(image uint8 [S, S, 3], mask uint8 [S, S] in {0, 1})``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = size / 2.0
    fundus_r = size * 0.47
    r2 = ((yy - c0) ** 2 + (xx - c0) ** 2) / fundus_r**2
    shade = np.clip(1.0 - 0.35 * r2, 0.0, 1.0) * (r2 <= 1.0)
    base = FUNDUS_RGB[None, None, :] * rng.uniform(0.9, 1.1) * shade[..., None]

    disc_r = size * rng.uniform(0.06, 0.08)
    disc_c = (c0 + rng.uniform(-0.18, 0.18) * size, c0 + rng.uniform(-0.1, 0.1) * size)
    if category == Category.ACQUIRED and coarse_cue:
        d = np.hypot(xx - disc_c[0], yy - disc_c[1])
        rim = (d > disc_r) & (d < 2.6 * disc_r) & (r2 <= 1.0)
        base[rim] += 55.0

    img = Image.fromarray(np.clip(base, 0, 255).astype(np.uint8))
    mask = Image.new("L", (size, size), 0)
    draw, mdraw = ImageDraw.Draw(img), ImageDraw.Draw(mask)

    segments = _grow_vessels(rng, size, disc_c, fundus_r)
    for a, b, w in segments:
        draw.line([a, b], fill=VESSEL_RGB, width=w)
        mdraw.line([a, b], fill=1, width=w)
    box = [disc_c[0] - disc_r, disc_c[1] - disc_r, disc_c[0] + disc_r, disc_c[1] + disc_r]
    draw.ellipse(box, fill=DISC_RGB)
    mdraw.ellipse(box, fill=1)

    pixels = np.asarray(img, dtype=np.float64).copy()
    vessel = np.asarray(mask, dtype=np.uint8)
    if category == Category.INHERITED:
        _add_speckles(rng, pixels, vessel, difficulty)

    pixels += rng.normal(0.0, 3.0, pixels.shape) * (r2 <= 1.0)[..., None]
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8), vessel


def _add_speckles(rng, pixels: np.ndarray, vessel: np.ndarray, difficulty: float):
    """Dark 2-3 px squares placed just beside vessel pixels, outside the mask."""
    size = vessel.shape[0]
    ys, xs = np.nonzero(vessel)
    if len(ys) == 0:
        return
    contrast = 1.0 - 0.85 * difficulty
    count = max(6, size * size // 180)
    for idx in rng.choice(len(ys), size=min(count, len(ys)), replace=False):
        side = int(rng.integers(2, 4))
        oy, ox = rng.integers(-3, 4, size=2)
        y0 = int(np.clip(ys[idx] + oy, 0, size - side))
        x0 = int(np.clip(xs[idx] + ox, 0, size - side))
        patch = (slice(y0, y0 + side), slice(x0, x0 + side))
        outside = vessel[patch] == 0
        blended = pixels[patch] * (1 - contrast) + PIGMENT_RGB * contrast
        pixels[patch] = np.where(outside[..., None], blended, pixels[patch])


def random_patient(rng: np.random.Generator) -> PatientMetadata:
    return PatientMetadata(
        age=int(rng.integers(8, 80)),
        sex=str(rng.choice(["male", "female"])),
        eye=str(rng.choice(["right", "left"])),
        acuity=str(rng.choice(ACUITIES)),
    )


def generate_synthetic(
    n: int,
    image_size: int = 64,
    difficulty: float = 0.5,
    seed: int = 42,
    coarse_cue_rate: float = 1.0,
    metadata_rate: float = 1.0,
    table: DiseaseTable = DISEASE_TABLE,
) -> list[Sample]:
    """``n`` samples alternating Acquired / Inherited; sample ``i`` depends only on ``(seed, i)``."""
    if n <= 0:
        raise ValueError("n must be positive")
    samples = []
    for i in tqdm(range(n), desc="synthesizing", leave=False):
        rng = np.random.default_rng([seed, i])
        category = Category.ACQUIRED if i % 2 == 0 else Category.INHERITED
        label = str(rng.choice(table.labels_in(category)))
        coarse = rng.random() < coarse_cue_rate
        image, mask = draw_fundus(rng, image_size, category, difficulty, coarse)
        meta: Optional[PatientMetadata] = None
        if category == Category.INHERITED and rng.random() < metadata_rate:
            meta = random_patient(rng)
        samples.append(
            Sample(
                id=f"syn-{i:05d}",
                disease=label,
                category=category,
                prompt=build_prompt(meta),
                reference=reference_text(label, table),
                metadata=meta,
                image=image,
                mask=mask,
                source="synthetic",
            )
        )
    return samples


def generate_from_config(cfg: SyntheticConfig, seed: int) -> list[Sample]:
    return generate_synthetic(
        cfg.n,
        image_size=cfg.image_size,
        difficulty=cfg.difficulty,
        seed=seed,
        coarse_cue_rate=cfg.coarse_cue_rate,
        metadata_rate=cfg.metadata_rate,
    )


def write_dataset(samples: list[Sample], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write ``images/*.png``, ``masks/*.png`` and the JSON-lines manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    manifest = out_dir / manifest_name
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w", encoding="utf-8") as f:
        for s in samples:
            image_rel, mask_rel = f"images/{s.id}.png", f"masks/{s.id}.png"
            write_png(out_dir / image_rel, s.raw_image())
            write_mask(out_dir / mask_rel, s.raw_mask())
            record = {
                "id": s.id,
                "image": image_rel,
                "mask": mask_rel,
                "disease": s.disease,
                "category": s.category.value,
                "prompt": s.prompt,
                "reference": s.reference,
                "metadata": s.metadata.model_dump() if s.metadata else None,
                "source": s.source,
            }
            f.write(json.dumps(record) + "\n")
    logger.info("wrote %d samples to %s", len(samples), manifest)
    return manifest
