import logging
from collections import Counter
from pathlib import Path

from tqdm import tqdm

from ..data.synthetic import generate_from_config, write_dataset
from ..errors import ConfigError
from ..preprocess import (
    IMAGE_SUFFIXES,
    load_watermark_specs,
    match_watermark,
    preprocess_image,
    read_image,
    read_mask,
    resize_mask,
    write_mask,
    write_png,
)
from .base import EXIT_OK, CommandRouter, arg, banner, resolve_config

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["data"])


@router.command(
    "preprocess",
    help="Remove watermarks by inpainting and resize images (and optional masks) to the configured size",
    arguments=[
        arg("--input", required=True, help="Directory of .png/.ppm images"),
        arg("--masks", default=None, help="Directory of same-named masks to resize alongside"),
        arg("--watermarks", default=None, help="JSON map of file-name glob -> {x, y, w, h, threshold}"),
        arg("--dest", default=None, help="Output directory (default: <out>/preprocessed)"),
    ],
)
def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    src = Path(args.input)
    if not src.is_dir():
        raise ConfigError(f"input directory not found: {src}")
    dest = Path(args.dest) if args.dest else cfg.out_path / "preprocessed"
    specs = load_watermark_specs(args.watermarks) if args.watermarks else {}
    size, radius = cfg.preprocess.size, cfg.preprocess.radius

    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    inpainted = 0
    for path in tqdm(files, desc="preprocessing", leave=False):
        spec = match_watermark(path.name, specs)
        inpainted += spec is not None
        write_png(dest / "images" / f"{path.stem}.png", preprocess_image(read_image(path), size, spec, radius))
        if args.masks:
            mask_path = Path(args.masks) / path.name
            if mask_path.exists():
                write_mask(dest / "masks" / f"{path.stem}.png", resize_mask(read_mask(mask_path), size, size))
            else:
                logger.warning("no mask for %s", path.name)

    banner(
        "PREPROCESSING COMPLETE",
        [f"Images:      {len(files)}", f"Inpainted:   {inpainted}", f"Size:        {size}x{size}", f"Output:      {dest}"],
    )
    return EXIT_OK


@router.command("gen-data", help="Generate the synthetic fundus dataset and its manifest")
def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    samples = generate_from_config(cfg.synthetic, cfg.seed)
    manifest = write_dataset(samples, cfg.manifest_path.parent, cfg.manifest_path.name)
    counts = Counter(s.category.value for s in samples)
    banner(
        "SYNTHETIC DATA WRITTEN",
        [f"Samples:     {len(samples)}"]
        + [f"  {name:<11}{counts[name]}" for name in sorted(counts)]
        + [f"Image size:  {cfg.synthetic.image_size}", f"Manifest:    {manifest}"],
    )
    return EXIT_OK
