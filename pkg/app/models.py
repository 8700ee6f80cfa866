"""
Data models for the CCE image-analysis pipeline, using Pydantic for validation.
"""
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

REPORT_SCHEMA_VERSION = 1


class RecognitionLabel(str, Enum):
    """Recognizer classes; the value order matches the network's output index."""
    NO_C_POLYP = "No-C-Polyp"
    C_POLYP = "C-Polyp"

    @property
    def index(self) -> int:
        return 0 if self is RecognitionLabel.NO_C_POLYP else 1


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Verdict(str, Enum):
    """Segmentation outcome for one image, in rule order."""
    MISSED_ROI = "missed_roi"
    WRONG_REGION = "wrong_region"
    SPLIT_ROI = "split_roi"
    CORRECT = "correct"


class SizeBucket(str, Enum):
    """Clinical size classes: <=6 mm, (6, 10) mm, [10, 20) mm, >=20 mm."""
    B0 = "B0"
    B1 = "B1"
    B2 = "B2"
    B3 = "B3"

    @property
    def index(self) -> int:
        return int(self.value[1])


class PhantomSample(BaseModel):
    """
    A synthetic CCE frame with its ground truth.

    `image` is (3, H, W) float64 in [0, 1], quantized to multiples of 1/255;
    `mask` is (H, W) uint8 with polyp pixels set to 1.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    origin_id: str = Field(..., description="ID of the original this sample was augmented from (itself if original)")
    image: np.ndarray
    mask: np.ndarray
    has_polyp: bool
    true_diameter_mm: float = Field(..., ge=0.0)
    cce_equivalent_mm: float = Field(..., ge=0.0)
    hp_mm: float = Field(..., ge=0.0)
    neoplastic: bool

    @model_validator(mode="after")
    def _check_mask(self):
        if self.has_polyp != bool(np.any(self.mask)):
            raise ValueError(f"Sample {self.id}: has_polyp={self.has_polyp} disagrees with its mask")
        return self


class ManifestRecord(BaseModel):
    """One JSON-lines row of a dataset manifest. Paths are relative to the dataset directory."""
    id: str
    origin_id: str
    image_path: str
    mask_path: str
    has_polyp: bool
    neoplastic: bool
    true_mm: float
    cce_mm: float
    hp_mm: float
    split: Split
    seed: int


class Manifest(BaseModel):
    seed: int
    records: list[ManifestRecord] = Field(default_factory=list)

    def ids(self, split: Split) -> list[str]:
        return [r.id for r in self.records if r.split == split]

    def by_split(self, split: Split) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


class EvalReport(BaseModel):
    """Binary confusion counts and the derived screening metrics; undefined ratios are None."""
    tp: int = Field(..., ge=0)
    fp: int = Field(..., ge=0)
    tn: int = Field(..., ge=0)
    fn: int = Field(..., ge=0)
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    npv: Optional[float] = None
    accuracy: Optional[float] = None


class Region(BaseModel):
    """One 8-connected component of a predicted mask."""
    label: int
    pixel_count: int
    bbox: tuple[int, int, int, int] = Field(..., description="(row_min, col_min, row_max, col_max), inclusive")


class SegmentationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mask: np.ndarray = Field(..., description="Binary (H, W) uint8 mask after small-component removal")
    labels: np.ndarray = Field(..., description="(H, W) int32 component labels, 0 for background")
    regions: list[Region] = Field(default_factory=list)
    verdict: Optional[Verdict] = None

    def region_masks(self) -> list[np.ndarray]:
        return [self.labels == r.label for r in self.regions]


class EllipseFit(BaseModel):
    """Moment-based ellipse of a pixel region; coordinates are (row, col) in pixels."""
    centroid: tuple[float, float]
    major_diameter: float = Field(..., ge=0.0)
    minor_diameter: float = Field(..., ge=0.0)
    orientation: float = Field(..., description="Angle of the major axis from the column axis, radians in [0, pi)")
    bbox: tuple[int, int, int, int]
    degenerate: bool = Field(False, description="True when the region is collinear and the minor diameter is 0")


class GramLayerSpectrum(BaseModel):
    layer: str
    gram: list[list[float]]
    eigenvalues: list[float]
    largest: float
    bulk_mean: float = Field(..., description="Mean of all eigenvalues but the largest")
    bulk_median: float
    leading_mass: float = Field(..., description="Largest eigenvalue over the trace")


class GramSpectrum(BaseModel):
    layers: list[GramLayerSpectrum] = Field(default_factory=list)

    def largest(self, layer: str) -> float:
        for entry in self.layers:
            if entry.layer == layer:
                return entry.largest
        raise KeyError(layer)


class ClassSupport(BaseModel):
    layer: str
    neoplastic: tuple[float, float]
    non_neoplastic: tuple[float, float]
    overlap: float


class FindingReport(BaseModel):
    """
    One pipeline report row. Size and characterization fields are present
    only when recognition flagged the frame as C-Polyp.
    """
    schema_version: int = REPORT_SCHEMA_VERSION
    id: str
    recognition_label: Optional[RecognitionLabel] = None
    recognition_confidence: Optional[float] = None
    saliency_path: Optional[str] = None
    cce_mm: Optional[float] = None
    hp_mm_predicted: Optional[float] = None
    size_bucket: Optional[SizeBucket] = None
    segmentation_verdict: Optional[Verdict] = None
    region_count: Optional[int] = None
    overlay_path: Optional[str] = None
    neoplastic: Optional[bool] = None
    neoplastic_confidence: Optional[float] = None
    spectrum_path: Optional[str] = None
    error: Optional[str] = None
