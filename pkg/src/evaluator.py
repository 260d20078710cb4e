"""Text-match classification of generated answers and the category metrics report."""

import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from tqdm import tqdm

from .data.diseases import ALIASES, DISEASE_TABLE, Category, DiseaseTable
from .data.sample import Sample
from .minivlm import TokenSequence

logger = logging.getLogger(__name__)

NONE_COLUMN = "None"
CATEGORIES = (Category.ACQUIRED.value, Category.INHERITED.value)
NA = "N/A"

Score = Union[float, Literal["N/A"]]


# ============================================================================
# Classification
# ============================================================================
@lru_cache(maxsize=8)
def _patterns(table: DiseaseTable) -> tuple[tuple[re.Pattern, Optional[str], Category], ...]:
    names: dict[str, tuple[Optional[str], Category]] = {}
    for label in table.labels:
        names[label.lower()] = (label, table.category_of(label))
    for alias, target in ALIASES.items():
        names.setdefault(alias, target)
    return tuple(
        (re.compile(rf"(?<!\w){re.escape(name)}(?!\w)"), label, category) for name, (label, category) in names.items()
    )


def classify_text(text: str, table: DiseaseTable = DISEASE_TABLE) -> tuple[Optional[str], Optional[Category]]:
    """Longest case-insensitive disease-name match; ties go to the earliest position.

    A bare "retinitis pigmentosa" resolves the Inherited category but no label.
    """
    lowered = (text or "").lower()
    best = None  # (-length, start, label, category)
    for pattern, label, category in _patterns(table):
        for m in pattern.finditer(lowered):
            key = (-(m.end() - m.start()), m.start(), label, category)
            if best is None or key[:2] < best[:2]:
                best = key
    if best is None:
        return None, None
    return best[2], best[3]


class PredictionRecord(BaseModel):
    sample_id: str
    text: str
    label: Optional[str] = None
    predicted: Optional[Category] = None
    truth: Category

    @classmethod
    def from_text(cls, sample_id: str, text: str, truth: Category, table: DiseaseTable = DISEASE_TABLE):
        label, predicted = classify_text(text, table)
        return cls(sample_id=sample_id, text=text, label=label, predicted=predicted, truth=truth)

    @property
    def correct(self) -> bool:
        return self.predicted == self.truth


# ============================================================================
# Metrics
# ============================================================================
class CategoryMetrics(BaseModel):
    precision: Score
    recall: Score
    f1: float
    support: int
    predicted: int


class MetricsReport(BaseModel):
    n: int
    accuracy: float
    categories: dict[str, CategoryMetrics]
    confusion: dict[str, dict[str, int]] = Field(
        description="true category -> predicted category (Acquired, Inherited, None) -> count"
    )


def _f1(precision: Score, recall: Score) -> float:
    if precision == NA or recall == NA or precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _score(value) -> Score:
    return NA if np.isnan(value) else float(value)


def compute_metrics(records: list[PredictionRecord]) -> MetricsReport:
    if not records:
        raise ValueError("cannot compute metrics over zero records")

    columns = CATEGORIES + (NONE_COLUMN,)
    y_true = [r.truth.value for r in records]
    y_pred = [r.predicted.value if r.predicted else NONE_COLUMN for r in records]
    # the None row stays empty: every record has a true category
    matrix = confusion_matrix(y_true, y_pred, labels=list(columns))[: len(CATEGORIES)]
    confusion = {t: {p: int(n) for p, n in zip(columns, row)} for t, row in zip(CATEGORIES, matrix)}

    precision, recall, _, support = precision_recall_fscore_support(
        y_true, y_pred, labels=list(CATEGORIES), average=None, zero_division=np.nan
    )
    predicted = matrix[:, : len(CATEGORIES)].sum(axis=0)
    categories = {}
    for i, c in enumerate(CATEGORIES):
        p, r = _score(precision[i]), _score(recall[i])
        categories[c] = CategoryMetrics(
            precision=p, recall=r, f1=_f1(p, r), support=int(support[i]), predicted=int(predicted[i])
        )

    correct = int(np.trace(matrix[:, : len(CATEGORIES)]))
    return MetricsReport(n=len(records), accuracy=correct / len(records), categories=categories, confusion=confusion)


def confusion_frame(report: MetricsReport) -> pd.DataFrame:
    frame = pd.DataFrame.from_dict(report.confusion, orient="index")
    frame = frame.reindex(index=list(CATEGORIES), columns=list(CATEGORIES + (NONE_COLUMN,)))
    frame.index.name = "true"
    return frame


def emit_report(report: MetricsReport, out_dir, records: Optional[list[PredictionRecord]] = None) -> dict[str, Path]:
    """Write ``metrics.json``, ``confusion.csv`` and, when given, ``predictions.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out_dir / "metrics.json", "confusion": out_dir / "confusion.csv"}
    paths["metrics"].write_text(report.model_dump_json(indent=2) + "\n")
    confusion_frame(report).to_csv(paths["confusion"])
    if records is not None:
        paths["predictions"] = out_dir / "predictions.csv"
        pd.DataFrame(
            [
                {
                    "id": r.sample_id,
                    "truth": r.truth.value,
                    "predicted": r.predicted.value if r.predicted else NONE_COLUMN,
                    "label": r.label or "",
                    "text": r.text,
                }
                for r in records
            ]
        ).to_csv(paths["predictions"], index=False)
    logger.info("wrote report (%d records, accuracy %.4f) to %s", report.n, report.accuracy, out_dir)
    return paths


def load_report(path) -> MetricsReport:
    return MetricsReport.model_validate_json(Path(path).read_text())


# ============================================================================
# Generation
# ============================================================================
def evaluate_split(
    service,
    samples: list[Sample],
    fused: bool,
    max_new: Optional[int] = None,
    table: DiseaseTable = DISEASE_TABLE,
    progress: bool = True,
) -> list[PredictionRecord]:
    """Greedy answers for ``samples`` with ``service.model`` in eval mode, classified by text match."""
    model = service.model
    cfg = service.cfg
    max_new = cfg.train.max_new_tokens if max_new is None else max_new
    was_training = model.training
    model.eval()
    records = []
    try:
        for s in tqdm(samples, desc="generating", leave=False, disable=not progress):
            prompt = TokenSequence.from_text(service.vocab, s.prompt)
            text = model.generate(s.image_tensor(cfg.unet.image_size), prompt, service.vocab, fused, max_new)
            records.append(PredictionRecord.from_text(s.id, text, s.category, table))
    finally:
        model.train(was_training)
    return records
