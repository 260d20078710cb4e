"""JSON-lines dataset manifest.

One object per line::

    {"id": "...", "image": "images/a.png", "mask": "masks/a.png",
     "disease": "Glaucoma", "category": "Acquired",
     "prompt": null, "reference": null,
     "metadata": {"age": 41, "sex": "female", "eye": "right", "acuity": "10/180"},
     "source": "FIVES"}

``image`` and ``mask`` are resolved relative to the manifest's directory.
``category`` is optional but must agree with the disease table when given;
missing prompts and references are built from the metadata and label.
"""

import json
import logging
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import ManifestError
from .diseases import DISEASE_TABLE, Category, DiseaseTable
from .prompts import build_prompt, reference_text
from .sample import PatientMetadata, Sample

logger = logging.getLogger(__name__)


class ManifestRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., min_length=1)
    image: str
    mask: str
    disease: str
    category: Optional[Category] = None
    prompt: Optional[str] = None
    reference: Optional[str] = None
    metadata: Optional[PatientMetadata] = None
    source: Optional[str] = None


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    where = ".".join(str(p) for p in err["loc"]) or "record"
    return f"{where}: {err['msg']}"


def load_manifest(path, table: DiseaseTable = DISEASE_TABLE) -> list[Sample]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    samples: list[Sample] = []
    seen: set[str] = set()

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = ManifestRecord.model_validate(json.loads(line))
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", lineno) from e
            except ValidationError as e:
                raise ManifestError(_first_error(e), lineno) from e

            try:
                category = table.category_of(record.disease)
            except KeyError:
                raise ManifestError(f"unknown disease label {record.disease!r}", lineno) from None
            if record.category is not None and record.category != category:
                raise ManifestError(
                    f"category {record.category.value} contradicts {record.disease} ({category.value})", lineno
                )
            if record.id in seen:
                raise ManifestError(f"duplicate id {record.id!r}", lineno)
            seen.add(record.id)

            samples.append(
                Sample(
                    id=record.id,
                    disease=record.disease,
                    category=category,
                    prompt=record.prompt or build_prompt(record.metadata),
                    reference=record.reference or reference_text(record.disease, table),
                    metadata=record.metadata,
                    image_path=root / record.image,
                    mask_path=root / record.mask,
                    source=record.source,
                )
            )
    logger.info("loaded %d samples from %s", len(samples), path)
    return samples
