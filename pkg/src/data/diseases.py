from dataclasses import dataclass
from enum import Enum


class Category(str, Enum):
    ACQUIRED = "Acquired"
    INHERITED = "Inherited"


@dataclass(frozen=True)
class InheritedProfile:
    gene: str
    mode: str


@dataclass(frozen=True)
class DiseaseTable:
    acquired: tuple[str, ...]
    inherited: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.acquired) & set(self.inherited)
        if overlap:
            raise ValueError(f"disease sets overlap: {sorted(overlap)}")

    @property
    def labels(self) -> tuple[str, ...]:
        return self.acquired + self.inherited

    def category_of(self, label: str) -> Category:
        if label in self.acquired:
            return Category.ACQUIRED
        if label in self.inherited:
            return Category.INHERITED
        raise KeyError(label)

    def labels_in(self, category: Category) -> tuple[str, ...]:
        return self.acquired if category == Category.ACQUIRED else self.inherited


DISEASE_TABLE = DiseaseTable(
    acquired=("Glaucoma", "Diabetic Retinopathy", "Age-related Macular Degeneration"),
    inherited=(
        "AR Retinitis Pigmentosa",
        "AD Retinitis Pigmentosa",
        "XL Retinitis Pigmentosa",
        "Best Disease",
        "AR Stargardt Disease",
    ),
)

# Representative causative gene and inheritance mode used in reference texts
INHERITED_PROFILES = {
    "AR Retinitis Pigmentosa": InheritedProfile("USH2A", "AR"),
    "AD Retinitis Pigmentosa": InheritedProfile("RHO", "AD"),
    "XL Retinitis Pigmentosa": InheritedProfile("RPGR", "XL"),
    "Best Disease": InheritedProfile("BEST1", "AD"),
    "AR Stargardt Disease": InheritedProfile("ABCA4", "AR"),
}

# Alternative spellings found in dataset prose and model output -> canonical label.
# A None label resolves only the category.
ALIASES: dict[str, tuple[str | None, Category]] = {
    "diabetes": ("Diabetic Retinopathy", Category.ACQUIRED),
    "diabetic retinopathy": ("Diabetic Retinopathy", Category.ACQUIRED),
    "armd": ("Age-related Macular Degeneration", Category.ACQUIRED),
    "age related macular degeneration": ("Age-related Macular Degeneration", Category.ACQUIRED),
    "macular degeneration": ("Age-related Macular Degeneration", Category.ACQUIRED),
    "glaucomatous": ("Glaucoma", Category.ACQUIRED),
    "stargardt disease": ("AR Stargardt Disease", Category.INHERITED),
    "stargardt": ("AR Stargardt Disease", Category.INHERITED),
    "best vitelliform": ("Best Disease", Category.INHERITED),
    "retinitis pigmentosa": (None, Category.INHERITED),
}
