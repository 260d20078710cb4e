from .diseases import DISEASE_TABLE, Category, DiseaseTable
from .manifest import load_manifest
from .sample import PatientMetadata, Sample
from .splits import split, split_sizes
from .synthetic import generate_synthetic, write_dataset

__all__ = [
    "DISEASE_TABLE",
    "Category",
    "DiseaseTable",
    "load_manifest",
    "PatientMetadata",
    "Sample",
    "split",
    "split_sizes",
    "generate_synthetic",
    "write_dataset",
]
