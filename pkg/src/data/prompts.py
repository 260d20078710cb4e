from typing import Optional

from .diseases import DISEASE_TABLE, INHERITED_PROFILES, Category, DiseaseTable
from .sample import PatientMetadata

INSTRUCTION = (
    "Act as an expert clinician and assess the health of the eye of this patient "
    "based on the fundus image and the additional information, if available. "
    "State the diagnosis disease."
)

BARE_SENTENCE = "This is a fundus photography image."


def patient_sentence(meta: Optional[PatientMetadata]) -> str:
    if meta is None or not meta.is_informative():
        return BARE_SENTENCE
    parts = ["This is a fundus photography image"]
    if meta.eye:
        parts.append(f"for the {meta.eye} eye")
    if meta.age is not None or meta.sex:
        who = " ".join(p for p in (f"{meta.age} year old" if meta.age is not None else None, meta.sex) if p)
        parts.append(f"of a {who}" if meta.eye else f"for a {who}")
    if meta.acuity:
        parts.append(f"with a visual acuity of {meta.acuity}")
    return " ".join(parts) + "."


def build_prompt(meta: Optional[PatientMetadata]) -> str:
    return f"{INSTRUCTION} {patient_sentence(meta)}"


def reference_text(label: str, table: DiseaseTable = DISEASE_TABLE) -> str:
    """Templated answer: the diagnosis sentence, plus gene and inheritance mode for inherited labels."""
    if table.category_of(label) == Category.INHERITED and label in INHERITED_PROFILES:
        profile = INHERITED_PROFILES[label]
        return (
            f"The diagnosis disease is {label}, which is associated with the {profile.gene} gene "
            f"and {profile.mode} inheritance mode."
        )
    return f"The diagnosis disease is {label}."


def vocabulary_seed_texts(table: DiseaseTable = DISEASE_TABLE) -> list[str]:
    """Texts every vocabulary must cover regardless of the training split."""
    texts = [build_prompt(None), build_prompt(PatientMetadata(age=40, sex="female", eye="right", acuity="20/20"))]
    texts += [build_prompt(PatientMetadata(sex="male", eye="left"))]
    texts += [reference_text(label, table) for label in table.labels]
    return texts
