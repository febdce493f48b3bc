"""Evaluation metrics, difficulty classification and bucketed reports."""

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DegenerateOverlapError, InputTooSmallError, ValidationError
from .geometry import (
    CanvasSpec,
    FourPointOffsets,
    Homography,
    ImageSize,
    canvas_extent,
    solve_dlt,
    warp_points,
)
from .tensorcore.tensor import Tensor4, as_array
from .utils.io import safe_write_file
from .warpmask import SamplingPlan, masks_for, overlap_rate

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BUCKETS = (("0-30%", 0, 3), ("30-60%", 3, 6), ("60-100%", 6, 10))
MIN_REPORT_SAMPLES = 10
HIGH_OVERLAP = 0.9
LOW_OVERLAP = 0.6
PARALLAX_LIMIT = 30.0


class OverlapLevel(str, Enum):
    HIGH = "HIGH"
    MIDDLE = "MIDDLE"
    LOW = "LOW"


class ParallaxLevel(str, Enum):
    SMALL = "SMALL"
    LARGE = "LARGE"


def _overlap_views(ref: np.ndarray, target: np.ndarray, h: Homography):
    if ref.shape != target.shape:
        raise ValidationError(f"Images differ in shape: {ref.shape} vs {target.shape}")
    size = ref.shape[2:]
    plan = SamplingPlan.build(h, CanvasSpec(size[1], size[0], (0.0, 0.0)), size)
    mask = plan.gather(np.ones((1, 1) + tuple(size)))
    return mask, mask * ref, plan.gather(target)


def psnr_overlap(ref: "Tensor4 | np.ndarray", target: "Tensor4 | np.ndarray", h: Homography) -> float:
    """PSNR (peak 1.0) between H(E) * ref and H(target) over the valid mask; inf when equal."""
    a, b = as_array(ref), as_array(target)
    mask, masked_ref, warped = _overlap_views(a, b, h)
    weight = float(mask.sum()) * a.shape[1]
    if weight <= 0.0:
        raise DegenerateOverlapError("PSNR overlap mask is empty")
    mse = float((mask * (masked_ref - warped) ** 2).sum() / weight)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def cap_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation keeping only windows fully inside the (h, w) image."""
    k = len(kernel)
    rows = sliding_window_view(image, k, axis=0) @ kernel
    return sliding_window_view(rows, k, axis=1) @ kernel


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """SSIM of every full 11x11 window of two (h, w) images (dynamic range 1)."""
    g = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def ssim_overlap(ref: "Tensor4 | np.ndarray", target: "Tensor4 | np.ndarray", h: Homography) -> float:
    """Mean SSIM over windows lying entirely inside the valid mask, averaged over channels."""
    a, b = as_array(ref), as_array(target)
    mask, masked_ref, warped = _overlap_views(a, b, h)
    m = mask[0, 0]
    if min(m.shape) < SSIM_WINDOW:
        raise InputTooSmallError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    full = sliding_window_view(m >= 1.0 - 1e-9, (SSIM_WINDOW, SSIM_WINDOW)).all(axis=(2, 3))
    if not full.any():
        raise InputTooSmallError("Overlap region holds no complete 11x11 window")
    scores = []
    for bi in range(a.shape[0]):
        for c in range(a.shape[1]):
            scores.append(ssim_map(masked_ref[bi, c], warped[bi, c])[full].mean())
    return float(np.mean(scores))


def four_pt_rmse(estimated: FourPointOffsets, truth: FourPointOffsets) -> float:
    """Root mean square over the eight offset scalars."""
    diff = estimated.values - truth.values
    return float(np.sqrt(np.mean(diff * diff)))


def classify_overlap(rate: float) -> OverlapLevel:
    """HIGH above 90%, MIDDLE within [60%, 90%], LOW below 60%."""
    if not 0.0 <= rate <= 1.0 or math.isnan(rate):
        raise ValidationError(f"Overlap rate must lie in [0, 1], got {rate}")
    if rate > HIGH_OVERLAP:
        return OverlapLevel.HIGH
    if rate >= LOW_OVERLAP:
        return OverlapLevel.MIDDLE
    return OverlapLevel.LOW


def classify_parallax(max_misalignment_px: float) -> ParallaxLevel:
    """SMALL up to and including 30 px of residual misalignment, LARGE above."""
    if max_misalignment_px < 0 or math.isnan(max_misalignment_px):
        raise ValidationError(f"Misalignment must be non-negative, got {max_misalignment_px}")
    return ParallaxLevel.SMALL if max_misalignment_px <= PARALLAX_LIMIT else ParallaxLevel.LARGE


def measure_parallax(
    estimated: Homography, truth: Homography, image_size: ImageSize, grid: int = 8
) -> float:
    """Largest distance between grid points mapped by the two homographies."""
    w, h = image_size
    xs = np.linspace(0.0, w, grid)
    ys = np.linspace(0.0, h, grid)
    points = np.array([[x, y] for y in ys for x in xs])
    return float(np.max(np.linalg.norm(warp_points(estimated, points) - warp_points(truth, points), axis=1)))


@dataclass
class SampleMetrics:
    """Per-pair evaluation record."""

    id: str
    psnr: float
    ssim: Optional[float]
    overlap_rate: float
    overlap_level: str
    rmse: Optional[float] = None
    parallax_px: Optional[float] = None
    parallax_level: Optional[str] = None

    def value(self, metric: str) -> float:
        v = getattr(self, metric)
        if v is None:
            raise ValidationError(f"Sample '{self.id}' has no '{metric}' value")
        return float(v)


def evaluate_pair(
    record_id: str,
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    estimated: FourPointOffsets,
    truth: Optional[FourPointOffsets] = None,
) -> SampleMetrics:
    a, b = as_array(ref), as_array(target)
    size = (a.shape[3], a.shape[2])
    h = solve_dlt(estimated, size)
    masks = masks_for(h, canvas_extent(estimated, size), size)
    rate = overlap_rate(masks.content_a, masks.content_b)
    try:
        ssim: Optional[float] = ssim_overlap(a, b, h)
    except InputTooSmallError:
        logger.warning("[%s] overlap too small for SSIM", record_id)
        ssim = None
    metrics = SampleMetrics(
        id=record_id,
        psnr=cap_psnr(psnr_overlap(a, b, h)),
        ssim=ssim,
        overlap_rate=rate,
        overlap_level=classify_overlap(rate).value,
    )
    if truth is not None:
        metrics.rmse = four_pt_rmse(estimated, truth)
        metrics.parallax_px = measure_parallax(h, solve_dlt(truth, size), size)
        metrics.parallax_level = classify_parallax(metrics.parallax_px).value
    return metrics


@dataclass
class Bucket:
    label: str
    count: int
    mean: float


@dataclass
class EvalReport:
    """Bucketed summary of one metric over a set of samples."""

    metric: str
    higher_is_better: bool
    values: List[float]
    buckets: List[Bucket]
    average: float
    samples: List[SampleMetrics] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "higher_is_better": self.higher_is_better,
            "values": list(self.values),
            "buckets": [asdict(b) for b in self.buckets],
            "average": self.average,
            "samples": [asdict(s) for s in self.samples],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            metric=data["metric"],
            higher_is_better=bool(data["higher_is_better"]),
            values=[float(v) for v in data["values"]],
            buckets=[Bucket(**b) for b in data["buckets"]],
            average=float(data["average"]),
            samples=[SampleMetrics(**s) for s in data.get("samples", [])],
        )

    def render_text(self) -> str:
        order = "higher is better" if self.higher_is_better else "lower is better"
        lines = [f"{self.metric} ({order}), {len(self.values)} samples", ""]
        lines.append(f"{'bucket':<10}{'count':>8}{'mean':>14}")
        for b in self.buckets:
            lines.append(f"{b.label:<10}{b.count:>8}{b.mean:>14.6f}")
        lines.append(f"{'average':<10}{len(self.values):>8}{self.average:>14.6f}")
        return "\n".join(lines) + "\n"

    def samples_csv(self) -> str:
        buffer = io.StringIO()
        names = [f.name for f in SampleMetrics.__dataclass_fields__.values()]
        writer = csv.DictWriter(buffer, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for s in self.samples:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(s).items()})
        return buffer.getvalue()

    def write_samples_csv(self, path: Path) -> None:
        safe_write_file(Path(path), self.samples_csv())


def build_report(
    samples: Sequence[Union[SampleMetrics, float]],
    metric: str = "rmse",
    higher_is_better: bool = False,
) -> EvalReport:
    """Sort by ``metric`` (best first) and average the 0-30%, 30-60% and 60-100% tranches."""
    if len(samples) < MIN_REPORT_SAMPLES:
        raise ValidationError(
            f"A report needs at least {MIN_REPORT_SAMPLES} samples, got {len(samples)}"
        )
    records = [s for s in samples if isinstance(s, SampleMetrics)]
    values = [s.value(metric) if isinstance(s, SampleMetrics) else float(s) for s in samples]
    ordered = sorted(values, reverse=higher_is_better)
    n = len(ordered)
    buckets = []
    for label, lo, hi in BUCKETS:
        chunk = ordered[n * lo // 10 : n * hi // 10]
        buckets.append(Bucket(label, len(chunk), float(np.mean(chunk)) if chunk else 0.0))
    return EvalReport(
        metric=metric,
        higher_is_better=higher_is_better,
        values=ordered,
        buckets=buckets,
        average=float(np.mean(ordered)),
        samples=records,
    )
