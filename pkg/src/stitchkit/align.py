"""Unsupervised coarse alignment by direct photometric optimization of corner offsets.

The aligner minimizes the ablation loss over an image pyramid, coarsest level first,
with normalized gradient steps on the eight offset scalars. Steps that do not lower the
loss, leave the trust region or shrink the overlap below the floor are rejected and the
step length is decayed.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import (
    DegenerateGeometryError,
    InputTooSmallError,
    NonFiniteError,
    ShapeMismatchError,
    ValidationError,
)
from .geometry import (
    CanvasSpec,
    FourPointOffsets,
    Homography,
    canvas_extent,
    dlt_jacobian,
    scale_offsets,
    solve_dlt,
)
from .losses import LossResult, ablation_loss
from .tensorcore.layers import resize_bilinear
from .tensorcore.tensor import Tensor4, as_array
from .warpmask import MaskSet, masks_for, warp_image

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 32
LUMA = np.array([0.299, 0.587, 0.114])


class PyramidConfig(BaseModel):
    """Coarse-to-fine optimizer settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    levels: int = Field(3, ge=1)
    iterations_per_level: int = Field(200, ge=1)
    step_init: float = Field(1.0, gt=0.0)
    step_decay: float = Field(0.5, gt=0.0, lt=1.0)
    # trust region as a fraction of the image width
    max_offset: float = Field(0.45, gt=0.0)
    min_step: float = Field(1e-3, gt=0.0)
    plateau_tolerance: float = Field(1e-4, ge=0.0)
    plateau_patience: int = Field(10, ge=1)
    min_overlap: float = Field(0.10, ge=0.0, lt=1.0)


@dataclass
class AlignmentResult:
    """Stage-one outputs for one pair."""

    offsets: FourPointOffsets
    homography: Homography
    canvas: CanvasSpec
    warped_a: Tensor4
    warped_b: Tensor4
    masks: MaskSet
    final_loss: float
    degenerate: bool
    identity_loss: float = 0.0
    loss_trace: List[float] = field(default_factory=list)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.warped_a.spatial[1], self.warped_a.spatial[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "offsets": self.offsets.to_list(),
            "homography": self.homography.to_list(),
            "canvas": self.canvas.to_dict(),
            "final_loss": self.final_loss,
            "identity_loss": self.identity_loss,
            "degenerate": self.degenerate,
            "loss_trace": [float(v) for v in self.loss_trace],
        }


@dataclass
class _Estimate:
    offsets: FourPointOffsets
    loss: LossResult
    identity_loss: float
    trace: List[float]


def to_luma(image: np.ndarray) -> np.ndarray:
    """(b, 3, h, w) -> (b, 1, h, w) luma; single-channel input passes through."""
    if image.shape[1] == 1:
        return image
    if image.shape[1] != 3:
        raise ShapeMismatchError(f"Expected 1 or 3 channels, got {image.shape[1]}")
    return np.einsum("c,bchw->bhw", LUMA, image)[:, None]


def max_levels(height: int, width: int) -> int:
    return int(math.floor(math.log2(min(height, width)))) - 2


def build_pyramid(image: np.ndarray, levels: int) -> List[np.ndarray]:
    """Finest level first; each level halves (floor) both spatial dims."""
    pyramid = [image]
    for _ in range(levels - 1):
        h, w = pyramid[-1].shape[2:]
        pyramid.append(resize_bilinear(pyramid[-1], (h // 2, w // 2)))
    return pyramid


def _check_inputs(ref: np.ndarray, target: np.ndarray, cfg: PyramidConfig) -> None:
    if ref.shape != target.shape:
        raise ShapeMismatchError(f"Reference {ref.shape} and target {target.shape} differ")
    h, w = ref.shape[2:]
    if min(h, w) < MIN_IMAGE_SIZE:
        raise InputTooSmallError(f"Alignment needs images of at least 32x32, got {w}x{h}")
    if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(target))):
        raise NonFiniteError("Alignment inputs contain NaN/Inf")
    if cfg.levels > max_levels(h, w):
        raise ValidationError(
            f"{cfg.levels} pyramid levels is too many for {w}x{h} (max {max_levels(h, w)})"
        )


class _LevelObjective:
    """Ablation loss and its offset gradient at one pyramid level."""

    def __init__(self, ref: np.ndarray, target: np.ndarray):
        self.ref = ref
        self.target = target
        self.size = (ref.shape[3], ref.shape[2])

    def loss(self, offsets: FourPointOffsets) -> Optional[LossResult]:
        try:
            h = solve_dlt(offsets, self.size)
            return ablation_loss(self.ref, self.target, h)
        except DegenerateGeometryError:
            return None

    def gradient(self, offsets: FourPointOffsets) -> np.ndarray:
        h = solve_dlt(offsets, self.size)
        result = ablation_loss(self.ref, self.target, h, with_grad=True)
        d_h = result.grads["h"].reshape(-1)[:8]
        return dlt_jacobian(offsets, self.size).T @ d_h


def _optimize_level(
    objective: _LevelObjective,
    start: FourPointOffsets,
    cfg: PyramidConfig,
    trace: List[float],
) -> Tuple[FourPointOffsets, LossResult]:
    limit = cfg.max_offset * objective.size[0]
    offsets = FourPointOffsets(np.clip(start.values, -limit, limit))
    current = objective.loss(offsets)
    if current is None or current.degenerate:
        offsets = FourPointOffsets.zeros()
        current = objective.loss(offsets)
        assert current is not None
    start_loss = current.value
    step = cfg.step_init
    stalls = accepted = rejected = 0
    grad = objective.gradient(offsets)

    for _ in range(cfg.iterations_per_level):
        if step < cfg.min_step:
            break
        norm = float(np.linalg.norm(grad))
        if norm == 0.0 or not np.isfinite(norm):
            break
        candidate_values = np.clip(offsets.values - step * grad.reshape(4, 2) / norm, -limit, limit)
        candidate = FourPointOffsets(candidate_values)
        result = objective.loss(candidate)
        if (
            result is None
            or result.degenerate
            or (result.overlap or 0.0) < cfg.min_overlap
            or result.value >= current.value
        ):
            step *= cfg.step_decay
            rejected += 1
            continue

        improvement = (current.value - result.value) / max(current.value, 1e-12)
        offsets, current = candidate, result
        accepted += 1
        trace.append(current.value)
        grad = objective.gradient(offsets)
        stalls = stalls + 1 if improvement < cfg.plateau_tolerance else 0
        if stalls >= cfg.plateau_patience:
            step *= cfg.step_decay
            stalls = 0

    logger.debug(
        "level %dx%d: loss %.6f -> %.6f (%d accepted, %d rejected)",
        objective.size[0],
        objective.size[1],
        start_loss,
        current.value,
        accepted,
        rejected,
    )
    return offsets, current


def _estimate(
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    cfg: PyramidConfig,
    init: Optional[FourPointOffsets] = None,
) -> _Estimate:
    a = as_array(ref)
    b = as_array(target)
    _check_inputs(a, b, cfg)
    ref_pyr = build_pyramid(to_luma(a), cfg.levels)
    tgt_pyr = build_pyramid(to_luma(b), cfg.levels)

    full_w = a.shape[3]
    full_h = a.shape[2]
    coarse = ref_pyr[-1].shape
    offsets = init or FourPointOffsets.zeros()
    offsets = scale_offsets(offsets, coarse[3] / full_w, coarse[2] / full_h)
    trace: List[float] = []
    prev_size = (coarse[3], coarse[2])
    result: Optional[LossResult] = None
    for level in range(cfg.levels - 1, -1, -1):
        r, t = ref_pyr[level], tgt_pyr[level]
        size = (r.shape[3], r.shape[2])
        offsets = scale_offsets(offsets, size[0] / prev_size[0], size[1] / prev_size[1])
        offsets, result = _optimize_level(_LevelObjective(r, t), offsets, cfg, trace)
        prev_size = size

    assert result is not None
    identity = ablation_loss(ref_pyr[0], tgt_pyr[0], Homography.identity())
    if identity.value <= result.value:
        offsets, result = FourPointOffsets.zeros(), identity
    logger.info(
        "alignment finished: loss %.6f (identity %.6f), %d accepted steps",
        result.value,
        identity.value,
        len(trace),
    )
    return _Estimate(offsets, result, identity.value, trace)


def estimate_offsets(
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    cfg: Optional[PyramidConfig] = None,
    init: Optional[FourPointOffsets] = None,
) -> FourPointOffsets:
    """Corner offsets mapping the target onto the reference frame."""
    return _estimate(ref, target, cfg or PyramidConfig(), init).offsets


def compose_alignment(
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    offsets: FourPointOffsets,
    final_loss: float = 0.0,
    degenerate: bool = False,
    identity_loss: float = 0.0,
    trace: Optional[List[float]] = None,
) -> AlignmentResult:
    """Warp both images into the stitching domain of ``offsets`` and build their masks."""
    a = as_array(ref)
    b = as_array(target)
    size = (a.shape[3], a.shape[2])
    homography = solve_dlt(offsets, size)
    canvas = canvas_extent(offsets, size)
    warped_a = warp_image(a, Homography.identity(), canvas)
    warped_b = warp_image(b, homography, canvas)
    return AlignmentResult(
        offsets=offsets,
        homography=homography,
        canvas=canvas,
        warped_a=warped_a,
        warped_b=warped_b,
        masks=masks_for(homography, canvas, size),
        final_loss=final_loss,
        degenerate=degenerate,
        identity_loss=identity_loss,
        loss_trace=list(trace or []),
    )


def align_pair(
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    cfg: Optional[PyramidConfig] = None,
) -> AlignmentResult:
    """Estimate offsets, then warp both images and build the MaskSet."""
    est = _estimate(ref, target, cfg or PyramidConfig())
    return compose_alignment(
        ref,
        target,
        est.offsets,
        final_loss=est.loss.value,
        degenerate=est.loss.degenerate,
        identity_loss=est.identity_loss,
        trace=est.trace,
    )
