import json
import warnings

import numpy as np
import pandas as pd
import pytest

from src.data import Category
from src.evaluator import (
    NA,
    NONE_COLUMN,
    PredictionRecord,
    classify_text,
    compute_metrics,
    confusion_frame,
    emit_report,
    load_report,
)

ACQ, INH = Category.ACQUIRED, Category.INHERITED


def record(truth: Category, predicted, i: int = 0) -> PredictionRecord:
    return PredictionRecord(sample_id=f"r{i}", text="", truth=truth, predicted=predicted)


# ============================================================================
# Text matching
# ============================================================================
@pytest.mark.parametrize(
    "text,expected",
    [
        ("The diagnosis disease is Glaucoma.", ("Glaucoma", ACQ)),
        (
            "The diagnosis disease is XL Retinitis Pigmentosa, which is associated with the RPGR gene and XL inheritance mode.",
            ("XL Retinitis Pigmentosa", INH),
        ),
        ("The retina appears normal.", (None, None)),
        ("signs of retinitis pigmentosa", (None, INH)),
        ("The diagnosis disease is AR Stargardt Disease.", ("AR Stargardt Disease", INH)),
        ("consistent with stargardt", ("AR Stargardt Disease", INH)),
        ("history of diabetes", ("Diabetic Retinopathy", ACQ)),
        ("DIABETIC RETINOPATHY, moderate", ("Diabetic Retinopathy", ACQ)),
        ("age-related macular degeneration", ("Age-related Macular Degeneration", ACQ)),
        ("best disease or glaucoma", ("Best Disease", INH)),
        ("glaucoma or best disease", ("Best Disease", INH)),
        ("glaucoma and armd", ("Glaucoma", ACQ)),
        ("Bestdisease glaucomatous", ("Glaucoma", ACQ)),
        ("", (None, None)),
    ],
)
def test_classify_text(text, expected):
    assert classify_text(text) == expected


def test_classify_text_is_total_on_noise():
    rng = np.random.default_rng(0)
    alphabet = list("abcdefghij klmnopqrstuvwxyz.,-/0123456789")
    for _ in range(50):
        text = "".join(rng.choice(alphabet, size=int(rng.integers(0, 60))))
        label, category = classify_text(text)
        assert (label is None) or category is not None


def test_prediction_record_from_text():
    r = PredictionRecord.from_text("s1", "The diagnosis disease is Best Disease.", INH)
    assert (r.label, r.predicted, r.correct) == ("Best Disease", INH, True)
    miss = PredictionRecord.from_text("s2", "no finding", ACQ)
    assert miss.predicted is None and not miss.correct


# ============================================================================
# Metrics
# ============================================================================
def test_all_correct():
    report = compute_metrics([record(ACQ, ACQ, 0), record(INH, INH, 1)])
    assert report.accuracy == 1.0
    assert report.categories["Acquired"].f1 == 1.0
    assert report.categories["Inherited"].f1 == 1.0


def test_high_precision_low_recall_counts():
    records = [record(ACQ, ACQ, i) for i in range(61)]
    records += [record(ACQ, None, 100 + i) for i in range(39)]
    records += [record(INH, ACQ, 200)]
    acq = compute_metrics(records).categories["Acquired"]
    assert acq.recall == pytest.approx(0.61)
    assert acq.precision == pytest.approx(61 / 62)

    # TP:FP = 19:1 and TP:FN = 61:39
    scaled = [record(ACQ, ACQ, i) for i in range(1159)]
    scaled += [record(ACQ, None, 2000 + i) for i in range(741)]
    scaled += [record(INH, ACQ, 3000 + i) for i in range(61)]
    acq = compute_metrics(scaled).categories["Acquired"]
    assert acq.precision == pytest.approx(19 / 20)
    assert acq.recall == pytest.approx(61 / 100)
    assert acq.f1 == pytest.approx(2 * 0.95 * 0.61 / 1.56)
    assert round(acq.f1, 2) == 0.74


def test_single_unmatched_record():
    report = compute_metrics([record(ACQ, None)])
    assert report.accuracy == 0.0
    acq = report.categories["Acquired"]
    assert acq.precision == NA
    assert acq.recall == 0.0
    assert acq.f1 == 0.0
    inh = report.categories["Inherited"]
    assert inh.precision == NA and inh.recall == NA and inh.support == 0


def test_empty_input_is_rejected():
    with pytest.raises(ValueError):
        compute_metrics([])


def test_six_record_fixture():
    records = [
        record(ACQ, ACQ, 1),
        record(ACQ, INH, 2),
        record(ACQ, None, 3),
        record(INH, INH, 4),
        record(INH, INH, 5),
        record(INH, ACQ, 6),
    ]
    report = compute_metrics(records)
    assert report.n == 6
    assert report.accuracy == pytest.approx(3 / 6)
    assert report.confusion == {
        "Acquired": {"Acquired": 1, "Inherited": 1, "None": 1},
        "Inherited": {"Acquired": 1, "Inherited": 2, "None": 0},
    }
    acq, inh = report.categories["Acquired"], report.categories["Inherited"]
    assert (acq.precision, acq.recall) == (pytest.approx(1 / 2), pytest.approx(1 / 3))
    assert acq.f1 == pytest.approx(2 * (1 / 2) * (1 / 3) / (1 / 2 + 1 / 3))
    assert (inh.precision, inh.recall) == (pytest.approx(2 / 3), pytest.approx(2 / 3))
    assert inh.f1 == pytest.approx(2 / 3)
    assert (acq.support, acq.predicted, inh.support, inh.predicted) == (3, 2, 3, 3)


def _brute_force(truths, preds):
    n = len(truths)
    out = {"accuracy": sum(t == p for t, p in zip(truths, preds)) / n}
    for c in (ACQ, INH):
        tp = sum(1 for t, p in zip(truths, preds) if t == c and p == c)
        npred = sum(1 for p in preds if p == c)
        ntrue = sum(1 for t in truths if t == c)
        out[c.value] = (tp / npred if npred else NA, tp / ntrue if ntrue else NA)
    return out


def test_metrics_match_brute_force_counter():
    rng = np.random.default_rng(42)
    choices = [ACQ, INH, None]
    for trial in range(100):
        n = int(rng.integers(1, 40))
        truths = [(ACQ, INH)[int(i)] for i in rng.integers(0, 2, n)]
        preds = [choices[int(i)] for i in rng.integers(0, 3, n)]
        report = compute_metrics([record(t, p, i) for i, (t, p) in enumerate(zip(truths, preds))])
        expected = _brute_force(truths, preds)
        assert report.accuracy == expected["accuracy"], trial
        for c in ("Acquired", "Inherited"):
            assert (report.categories[c].precision, report.categories[c].recall) == expected[c], trial
        assert sum(sum(row.values()) for row in report.confusion.values()) == n


# ============================================================================
# Report files
# ============================================================================
def test_report_files_round_trip(tmp_path):
    records = [
        PredictionRecord.from_text("a", "The diagnosis disease is Glaucoma.", ACQ),
        PredictionRecord.from_text("b", "nothing, sadly", INH),
        PredictionRecord.from_text("c", "The diagnosis disease is Best Disease.", INH),
    ]
    report = compute_metrics(records)
    paths = emit_report(report, tmp_path / "eval", records)
    assert load_report(paths["metrics"]) == report
    assert list(json.loads(paths["metrics"].read_text())) == ["n", "accuracy", "categories", "confusion"]

    confusion = pd.read_csv(paths["confusion"], index_col="true")
    assert list(confusion.columns) == ["Acquired", "Inherited", NONE_COLUMN]
    assert confusion.sum(axis=1).to_dict() == {"Acquired": 1, "Inherited": 2}
    assert confusion.to_numpy().sum() == report.n

    predictions = pd.read_csv(paths["predictions"], keep_default_na=False)
    assert predictions["predicted"].tolist() == ["Acquired", "None", "Inherited"]
    assert predictions["label"].tolist() == ["Glaucoma", "", "Best Disease"]


def test_report_is_deterministic(tmp_path):
    records = [record(ACQ, INH, 0), record(INH, None, 1)]
    emit_report(compute_metrics(records), tmp_path / "a")
    emit_report(compute_metrics(records), tmp_path / "b")
    for name in ("metrics.json", "confusion.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_confusion_frame_layout():
    frame = confusion_frame(compute_metrics([record(INH, None)]))
    assert frame.index.name == "true"
    assert frame.loc["Inherited", NONE_COLUMN] == 1
    assert frame.loc["Acquired"].sum() == 0


def test_undefined_scores_are_reported_without_warnings():
    records = [record(ACQ, None, i) for i in range(3)] + [record(INH, None, 3)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        report = compute_metrics(records)
    assert report.accuracy == 0.0
    for name in ("Acquired", "Inherited"):
        m = report.categories[name]
        assert (m.precision, m.recall, m.f1, m.predicted) == (NA, 0.0, 0.0, 0)
    assert report.confusion["Acquired"][NONE_COLUMN] == 3
