from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..preprocess import read_image, read_mask, resize_mask, resize_normalize
from .diseases import Category


class PatientMetadata(BaseModel):
    model_config = ConfigDict(extra="forbid")

    age: Optional[int] = Field(None, ge=0, le=120)
    sex: Optional[Literal["male", "female"]] = None
    eye: Optional[Literal["right", "left"]] = None
    acuity: Optional[str] = None

    def is_informative(self) -> bool:
        return any(v is not None for v in (self.age, self.sex, self.eye, self.acuity))


@dataclass
class Sample:
    """One image-text pair. Pixels come either from memory or, lazily, from disk."""

    id: str
    disease: str
    category: Category
    prompt: str
    reference: str
    metadata: Optional[PatientMetadata] = None
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    image: Optional[np.ndarray] = None  # uint8 [H, W, 3]
    mask: Optional[np.ndarray] = None  # uint8 [H, W] in {0, 1}
    source: Optional[str] = None

    def raw_image(self) -> np.ndarray:
        return self.image if self.image is not None else read_image(self.image_path)

    def raw_mask(self) -> np.ndarray:
        return self.mask if self.mask is not None else read_mask(self.mask_path)

    def image_tensor(self, size: int) -> np.ndarray:
        """``[3, size, size]`` float32 in [0, 1]."""
        return resize_normalize(self.raw_image(), size, size)

    def mask_tensor(self, size: int) -> np.ndarray:
        """``[1, size, size]`` float32 in {0, 1}."""
        return resize_mask(self.raw_mask(), size, size)[None].astype(np.float32)
