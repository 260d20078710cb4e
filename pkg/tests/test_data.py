import json
from collections import Counter

import numpy as np
import pytest

from src.config import SplitSpec
from src.data import (
    DISEASE_TABLE,
    Category,
    DiseaseTable,
    Sample,
    generate_synthetic,
    load_manifest,
    split,
    split_sizes,
    write_dataset,
)
from src.data.prompts import BARE_SENTENCE, INSTRUCTION, build_prompt, patient_sentence, reference_text
from src.data.sample import PatientMetadata
from src.errors import ManifestError, SplitError


def light_samples(n: int) -> list[Sample]:
    """Pixel-free samples, alternating categories."""
    out = []
    for i in range(n):
        category = Category.ACQUIRED if i % 2 == 0 else Category.INHERITED
        label = DISEASE_TABLE.labels_in(category)[0]
        out.append(Sample(id=f"s{i}", disease=label, category=category, prompt="p", reference="r"))
    return out


def write_manifest(path, records):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in records))
    return path


# ============================================================================
# Disease table and prompts
# ============================================================================
def test_disease_table_is_disjoint():
    assert set(DISEASE_TABLE.acquired).isdisjoint(DISEASE_TABLE.inherited)
    assert DISEASE_TABLE.category_of("Glaucoma") == Category.ACQUIRED
    assert DISEASE_TABLE.category_of("Best Disease") == Category.INHERITED
    with pytest.raises(ValueError):
        DiseaseTable(acquired=("A",), inherited=("A",))


def test_prompts_follow_the_template():
    assert build_prompt(None) == f"{INSTRUCTION} {BARE_SENTENCE}"
    meta = PatientMetadata(age=41, sex="female", eye="right", acuity="10/180")
    assert patient_sentence(meta) == (
        "This is a fundus photography image for the right eye of a 41 year old female "
        "with a visual acuity of 10/180."
    )
    assert patient_sentence(PatientMetadata()) == BARE_SENTENCE


def test_reference_texts():
    assert reference_text("Glaucoma") == "The diagnosis disease is Glaucoma."
    assert reference_text("XL Retinitis Pigmentosa").startswith(
        "The diagnosis disease is XL Retinitis Pigmentosa, which is associated with the RPGR gene"
    )


# ============================================================================
# Manifest
# ============================================================================
def test_empty_manifest_gives_no_samples(tmp_path):
    assert load_manifest(write_manifest(tmp_path / "m.jsonl", [])) == []


def test_manifest_record_resolves_category_and_paths(tmp_path):
    path = write_manifest(
        tmp_path / "m.jsonl",
        [{"id": "a", "image": "img/a.png", "mask": "msk/a.png", "disease": "Glaucoma"}, ""],
    )
    (sample,) = load_manifest(path)
    assert sample.category == Category.ACQUIRED
    assert sample.image_path == tmp_path / "img" / "a.png"
    assert sample.prompt == build_prompt(None)
    assert sample.reference == "The diagnosis disease is Glaucoma."


@pytest.mark.parametrize(
    "bad,fragment",
    [
        ({"id": "b", "image": "x", "mask": "y", "disease": "Healthy"}, "unknown disease"),
        ({"id": "b", "image": "x", "mask": "y", "disease": "Glaucoma", "category": "Inherited"}, "contradicts"),
        ({"id": "b", "image": "x", "disease": "Glaucoma"}, "mask"),
        ({"id": "b", "image": "x", "mask": "y", "disease": "Glaucoma", "colour": 1}, "colour"),
        ("{not json", "invalid JSON"),
        ({"id": "a", "image": "x", "mask": "y", "disease": "Glaucoma"}, "duplicate id"),
    ],
)
def test_manifest_errors_carry_line_numbers(tmp_path, bad, fragment):
    good = {"id": "a", "image": "x", "mask": "y", "disease": "Glaucoma"}
    path = write_manifest(tmp_path / "m.jsonl", [good, bad])
    with pytest.raises(ManifestError) as info:
        load_manifest(path)
    assert info.value.line == 2
    assert str(info.value).startswith("line 2:")
    assert fragment in str(info.value)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.jsonl")


# ============================================================================
# Splits
# ============================================================================
@pytest.mark.parametrize("n,sizes", [(1305, (913, 131, 261)), (200, (140, 20, 40)), (10, (7, 1, 2))])
def test_split_sizes(n, sizes):
    assert split_sizes(n, SplitSpec()) == sizes


def test_split_all_train():
    train, val, test = split(light_samples(10), SplitSpec(train=1.0, val=0.0, test=0.0))
    assert len(train) == 10 and val == [] and test == []


@pytest.mark.parametrize("n,seed", [(200, 42), (57, 1), (1305, 7)])
def test_split_partitions_input(n, seed):
    samples = light_samples(n)
    parts = split(samples, SplitSpec(), seed=seed)
    ids = [[s.id for s in part] for part in parts]
    assert sum(len(p) for p in ids) == n
    assert set().union(*map(set, ids)) == {s.id for s in samples}
    assert all(set(a).isdisjoint(b) for i, a in enumerate(ids) for b in ids[i + 1 :])
    assert tuple(len(p) for p in parts) == split_sizes(n, SplitSpec())


def test_split_is_stratified_and_deterministic():
    samples = light_samples(200)
    parts = split(samples, SplitSpec(), seed=42)
    for part in parts:
        share = Counter(s.category for s in part)[Category.ACQUIRED] / len(part)
        assert 0.45 <= share <= 0.55
    again = split(samples, SplitSpec(), seed=42)
    assert [[s.id for s in p] for p in parts] == [[s.id for s in p] for p in again]
    other = split(samples, SplitSpec(), seed=43)
    assert [s.id for s in parts[0]] != [s.id for s in other[0]]


def test_split_rejects_tiny_category():
    samples = light_samples(20)[:1] + [s for s in light_samples(20) if s.category == Category.INHERITED]
    with pytest.raises(SplitError):
        split(samples, SplitSpec())


# ============================================================================
# Synthetic generator
# ============================================================================
def test_synthetic_is_deterministic(tiny_samples):
    again = generate_synthetic(12, image_size=32, seed=3)
    for a, b in zip(tiny_samples, again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert (a.prompt, a.reference, a.disease) == (b.prompt, b.reference, b.disease)
    assert generate_synthetic(2, image_size=32, seed=4)[0].image.tobytes() != tiny_samples[0].image.tobytes()


def test_synthetic_samples_are_consistent(tiny_samples):
    for s in tiny_samples:
        assert s.image.shape == (32, 32, 3) and s.image.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.mask.sum() > 0
        assert DISEASE_TABLE.category_of(s.disease) == s.category
        assert s.disease in s.reference
    counts = Counter(s.category for s in tiny_samples)
    assert counts[Category.ACQUIRED] == counts[Category.INHERITED] == 6


def test_inherited_prompts_carry_metadata():
    samples = generate_synthetic(6, image_size=32, seed=5, metadata_rate=1.0)
    for s in samples:
        if s.category == Category.INHERITED:
            assert "year old" in s.prompt
        else:
            assert s.prompt.endswith(BARE_SENTENCE)


def test_rejects_non_positive_count():
    with pytest.raises(ValueError):
        generate_synthetic(0)


def test_written_dataset_loads_back(tmp_path, tiny_samples):
    manifest = write_dataset(tiny_samples[:4], tmp_path / "data")
    loaded = load_manifest(manifest)
    assert [s.id for s in loaded] == [s.id for s in tiny_samples[:4]]
    for orig, back in zip(tiny_samples, loaded):
        assert np.array_equal(back.raw_image(), orig.image)
        assert np.array_equal(back.raw_mask(), orig.mask)
        assert back.prompt == orig.prompt
        assert back.metadata == orig.metadata
    assert loaded[0].image_tensor(32).shape == (3, 32, 32)
    assert loaded[0].mask_tensor(16).shape == (1, 16, 16)
