"""
Core data models for densityfed
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import create_shape_mismatch_error


class ViewStyle(Enum):
    """Mammographic view geometry of an institution"""
    CC = "cc"
    MLO = "mlo"


class Regime(Enum):
    """Training regimes compared in the experiment"""
    CENTRALIZED_A = "centralized-A"
    CENTRALIZED_B = "centralized-B"
    CENTRALIZED_POOLED = "centralized-pooled"
    FEDERATED = "federated"

    @property
    def is_baseline(self) -> bool:
        return self is not Regime.FEDERATED


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel floating-point raster (row-major, shape height x width)"""
    pixels: np.ndarray
    original_size: Tuple[int, int]

    @classmethod
    def ingest(cls, pixels: np.ndarray) -> "Image":
        """Wrap a freshly read raster, recording its size as the original size"""
        array = np.asarray(pixels, dtype=np.float64)
        if array.ndim != 2:
            raise create_shape_mismatch_error("image rank", 2, array.ndim)
        return cls(pixels=array, original_size=(array.shape[0], array.shape[1]))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def with_pixels(self, pixels: np.ndarray) -> "Image":
        """Same provenance, new raster"""
        return Image(pixels=np.asarray(pixels, dtype=np.float64), original_size=self.original_size)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Per-pixel boolean raster"""
    bits: np.ndarray

    def __post_init__(self) -> None:
        if self.bits.dtype != np.bool_:
            object.__setattr__(self, "bits", np.asarray(self.bits).astype(bool))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return int(self.bits.shape[0])

    @property
    def width(self) -> int:
        return int(self.bits.shape[1])

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def intersect(self, other: "BinaryMask") -> "BinaryMask":
        if self.bits.shape != other.bits.shape:
            raise create_shape_mismatch_error("mask dims", self.bits.shape, other.bits.shape)
        return BinaryMask(self.bits & other.bits)

    def is_subset_of(self, other: "BinaryMask") -> bool:
        return bool(np.all(~self.bits | other.bits))


@dataclass(frozen=True)
class InstitutionProfile:
    """Appearance and cohort parameters of one synthetic institution"""
    name: str
    view_style: ViewStyle = ViewStyle.CC
    intensity_gain: float = 1.0
    noise_sigma: float = 0.01
    breast_size_range: Tuple[float, float] = (0.45, 0.7)
    dense_blob_range: Tuple[int, int] = (1, 5)
    tag_probability: float = 0.5
    n_subjects: int = 125
    images_per_subject: int = 2
    image_size: int = 64


@dataclass
class PhantomSample:
    """One synthetic mammogram with exact ground truth"""
    subject_id: str
    image_id: str
    image: Image
    breast_truth: BinaryMask
    dense_truth: BinaryMask
    pd_truth: float
    tag_box: Optional[Tuple[int, int, int, int]] = None  # row0, col0, rows, cols


@dataclass
class PDResult:
    """Output of the cascade for one image"""
    breast_mask: BinaryMask
    dense_mask: BinaryMask
    breast_area_px: int
    dense_area_px: int
    pd_percent: Optional[float]

    @property
    def failed(self) -> bool:
        """True when the breast mask came out empty and PD is undefined"""
        return self.pd_percent is None


@dataclass
class EvalRecord:
    """Per-image evaluation metrics"""
    subject_id: str
    image_id: str
    pd_true: float
    pd_pred: Optional[float]
    breast_dsc: float
    dense_dsc: float

    @property
    def failed(self) -> bool:
        return self.pd_pred is None

    @property
    def abs_error(self) -> Optional[float]:
        if self.pd_pred is None:
            return None
        return abs(self.pd_true - self.pd_pred)


@dataclass
class SubjectRecord:
    """Per-subject means of the image-level metrics"""
    subject_id: str
    n_images: int
    pd_true: float
    pd_pred: Optional[float]
    abs_error: Optional[float]
    breast_dsc: float
    dense_dsc: float


@dataclass
class CorrelationResult:
    """Spearman correlation with significance and 95% confidence interval"""
    rho: float
    p_value: float
    n: int
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None


@dataclass
class WilcoxonResult:
    """Wilcoxon signed-rank statistic and two-sided p-value"""
    w_plus: float
    p_value: float
    n: int


@dataclass(frozen=True)
class CollaboratorInfo:
    """Identity and training-set size of one collaborator"""
    collaborator_id: str
    sample_count: int


@dataclass
class MetricSummary:
    """Metrics of one regime evaluated on one test institution"""
    regime: Regime
    test_institution: str
    n_images: int
    n_failed: int
    mae_mean: Optional[float]
    mae_std: Optional[float]
    breast_dsc_mean: float
    breast_dsc_std: float
    dense_dsc_mean: float
    dense_dsc_std: float
    correlation: Optional[CorrelationResult] = None


@dataclass
class PairedComparison:
    """Federated vs a baseline on one test set and metric"""
    baseline: Regime
    test_institution: str
    metric: str
    n_subjects: int
    p_value: Optional[float]
    w_plus: Optional[float] = None


@dataclass
class ComparisonReport:
    """Everything the evaluate command emits"""
    summaries: List[MetricSummary] = field(default_factory=list)
    comparisons: List[PairedComparison] = field(default_factory=list)
    correlations: Dict[Tuple[str, str], Optional[CorrelationResult]] = field(default_factory=dict)
    scatter: Dict[Tuple[str, str], List[Tuple[float, float]]] = field(default_factory=dict)
