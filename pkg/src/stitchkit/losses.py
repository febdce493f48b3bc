"""Alignment and reconstruction objectives plus the frozen perceptual feature extractor.

Every differentiable loss returns a ``LossResult`` whose ``grads`` maps argument names to
gradients of the loss value, so training code can chain them into the network graphs.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import CheckpointError, InputTooSmallError, ShapeMismatchError
from .geometry import CanvasSpec, Homography
from .tensorcore.checkpoint import load_checkpoint, save_checkpoint
from .tensorcore.graph import Graph, run_backward, run_forward
from .tensorcore.layers import LayerKind, LayerSpec, resize_bilinear, resize_bilinear_backward
from .tensorcore.tensor import Tensor4, as_array
from .warpmask import SamplingPlan, warp_homography_grad

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor4, np.ndarray]
Scalar = Union["LossResult", float]

FEATURE_SEED = 19
DEEP_WIDTHS = (8, 16, 32, 32, 32)


@dataclass
class LossResult:
    """Scalar loss value, gradients by argument name, and the degenerate-overlap flag."""

    value: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    degenerate: bool = False
    # fraction of the source frame that stays valid (ablation loss only)
    overlap: Optional[float] = None

    def __float__(self) -> float:
        return self.value


class LossWeights(BaseModel):
    """Seam/content weights of each stage and the stage weights of the full objective."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_s: float = Field(2.0, ge=0.0)
    lambda_c: float = Field(1e-6, ge=0.0)
    omega_lr: float = Field(100.0, ge=0.0)
    omega_hr: float = Field(1.0, ge=0.0)
    omega_cs: float = Field(1.0, ge=0.0)


def _value(x: Scalar) -> float:
    return float(x)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------- alignment


def center_crop(image: ArrayLike, size: int) -> np.ndarray:
    """Central ``size`` x ``size`` patch."""
    data = as_array(image)
    h, w = data.shape[2:]
    if size > min(h, w) or size < 1:
        raise InputTooSmallError(f"Cannot crop {size}x{size} from {h}x{w}")
    top = (h - size) // 2
    left = (w - size) // 2
    return data[:, :, top : top + size, left : left + size]


def padding_loss(ref_patch: ArrayLike, warped_target_patch: ArrayLike) -> LossResult:
    """Mean absolute difference over every pixel of two equally sized patches."""
    a = as_array(ref_patch)
    b = as_array(warped_target_patch)
    _same_shape(a, b, "padding_loss")
    diff = a - b
    n = diff.size
    return LossResult(
        float(np.abs(diff).sum() / n),
        {"ref_patch": np.sign(diff) / n, "warped_target_patch": -np.sign(diff) / n},
    )


def _footprint_canvas(shape: Tuple[int, int]) -> CanvasSpec:
    return CanvasSpec(shape[1], shape[0], (0.0, 0.0))


def ablation_loss(
    ref: ArrayLike,
    target: ArrayLike,
    h: Homography,
    canvas: Optional[CanvasSpec] = None,
    with_grad: bool = False,
) -> LossResult:
    """Valid-pixel mean of |H(E) * ref - H(target)| in the reference frame.

    With an explicit (enlarged) ``canvas`` both terms are evaluated there and the valid
    region is further restricted to the reference footprint. ``with_grad`` adds
    ``grads["h"]``, the 3x3 derivative with respect to ``h``.
    """
    a = as_array(ref)
    b = as_array(target)
    _same_shape(a, b, "ablation_loss")
    source_shape = a.shape[2:]
    channels = a.shape[1]

    if canvas is None:
        canvas = _footprint_canvas(source_shape)
        ref_c = a
        footprint = None
    else:
        ident = SamplingPlan.build(Homography.identity(), canvas, source_shape)
        ref_c = ident.gather(a)
        footprint = ident.gather(np.ones((1, 1) + tuple(source_shape)))

    plan = SamplingPlan.build(h, canvas, source_shape)
    ones = np.ones((1, 1) + tuple(source_shape))
    mask_h = plan.gather(ones)
    warped = plan.gather(b)
    mask = mask_h if footprint is None else mask_h * footprint
    valid = float(mask.sum())
    area = float(source_shape[0] * source_shape[1])
    if valid < 1.0:
        grads = {"h": np.zeros((3, 3))} if with_grad else {}
        return LossResult(0.0, grads, degenerate=True, overlap=valid / area)

    target_term = warped if footprint is None else warped * footprint
    residual = mask * ref_c - target_term
    n = valid * channels
    total = float(np.abs(residual).sum())
    result = LossResult(total / n, overlap=valid / area)
    if with_grad:
        sign = np.sign(residual)
        d_warped = -sign / n
        d_mask = (sign * ref_c).sum(axis=1, keepdims=True) / n - total / (n * valid)
        if footprint is not None:
            d_warped = d_warped * footprint
            d_mask = d_mask * footprint
        result.grads["h"] = warp_homography_grad(
            b, h, canvas, d_warped, plan
        ) + warp_homography_grad(ones, h, canvas, d_mask, plan)
    return result


# ----------------------------------------------------------------------------- perceptual


class TapDepth(int, Enum):
    """Number of conv-relu-pool stages before the tapped activations."""

    SHALLOW = 3
    DEEP = 5


class FeatureExtractor:
    """Frozen conv3x3 + relu + maxpool2x2 stack.

    Parameters never change after construction; the extractor is shared freely between
    threads because evaluation never touches graph state.
    """

    INPUT = "image"

    def __init__(self, graph: Graph, tap: str, depth: int):
        self._graph = graph
        self.input_name = next(iter(graph.input_shapes))
        self.tap = tap
        self.depth = depth

    @classmethod
    def build(
        cls, tap_depth: TapDepth = TapDepth.DEEP, in_channels: int = 3, seed: int = FEATURE_SEED
    ) -> "FeatureExtractor":
        depth = int(TapDepth(tap_depth))
        graph = Graph("features")
        prev = graph.add_input(cls.INPUT, in_channels)
        channels = in_channels
        for stage, width in enumerate(DEEP_WIDTHS[:depth], start=1):
            prev = graph.add(f"conv{stage}", LayerSpec(LayerKind.CONV3X3, channels, width), prev)
            prev = graph.add(f"relu{stage}", LayerSpec(LayerKind.RELU, width, width), prev)
            prev = graph.add(f"pool{stage}", LayerSpec(LayerKind.MAXPOOL2X2, width, width), prev)
            channels = width
        graph.initialize(np.random.default_rng(seed))
        return cls(graph, prev, depth)

    @classmethod
    def from_checkpoint(cls, path: Path, tap_depth: TapDepth = TapDepth.DEEP) -> "FeatureExtractor":
        """Use externally supplied conv weights; the tap is the ``tap_depth``-th pooling node."""
        graphs, _ = load_checkpoint(path)
        graph = graphs.get("features") or next(iter(graphs.values()), None)
        if graph is None:
            raise CheckpointError(f"Checkpoint {path} holds no graph")
        if len(graph.input_shapes) != 1:
            raise CheckpointError("Feature checkpoints must declare exactly one input")
        pools = [n.name for n in graph.iter_layers(LayerKind.MAXPOOL2X2)]
        depth = int(TapDepth(tap_depth))
        if len(pools) < depth:
            raise CheckpointError(f"Checkpoint has {len(pools)} pooling stages, need {depth}")
        return cls(graph, pools[depth - 1], depth)

    def save(self, path: Path) -> None:
        save_checkpoint(path, {"features": self._graph}, {"tap": self.tap, "depth": self.depth})

    @property
    def in_channels(self) -> int:
        return self._graph.input_shapes[self.input_name][0]

    def _check(self, x: np.ndarray) -> None:
        need = 2**self.depth
        if min(x.shape[2:]) < need:
            raise InputTooSmallError(
                f"Perceptual features need spatial dims >= {need}, got {x.shape[2:]}"
            )

    def features(self, image: ArrayLike) -> np.ndarray:
        x = as_array(image)
        self._check(x)
        return run_forward(self._graph, {self.input_name: x})[self.tap]

    def features_and_vjp(
        self, image: ArrayLike
    ) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Features plus a function mapping d(features) to d(image)."""
        x = as_array(image)
        self._check(x)
        acts = run_forward(self._graph, {self.input_name: x})

        def vjp(grad: np.ndarray) -> np.ndarray:
            return run_backward(self._graph, acts, {self.tap: grad}, want_params=False).inputs[
                self.input_name
            ]

        return acts[self.tap], vjp


def perceptual_distance(a: ArrayLike, b: ArrayLike, fx: FeatureExtractor) -> LossResult:
    """Mean squared difference of the tapped features."""
    xa = as_array(a)
    xb = as_array(b)
    _same_shape(xa, xb, "perceptual_distance")
    fa, vjp_a = fx.features_and_vjp(xa)
    fb, vjp_b = fx.features_and_vjp(xb)
    diff = fa - fb
    n = diff.size
    d = 2.0 * diff / n
    return LossResult(float((diff * diff).sum() / n), {"a": vjp_a(d), "b": vjp_b(-d)})


# ----------------------------------------------------------------------------- reconstruction


def content_loss(
    stitched: ArrayLike,
    warped_a: ArrayLike,
    warped_b: ArrayLike,
    mask_a: ArrayLike,
    mask_b: ArrayLike,
    fx: FeatureExtractor,
) -> LossResult:
    """Perceptual distance of the masked stitched image to each warped input."""
    s = as_array(stitched)
    ia, ib = as_array(warped_a), as_array(warped_b)
    ma, mb = as_array(mask_a), as_array(mask_b)
    _same_shape(s, ia, "content_loss")
    _same_shape(s, ib, "content_loss")
    if ma.shape[2:] != s.shape[2:] or mb.shape[2:] != s.shape[2:]:
        raise ShapeMismatchError("content_loss: masks do not match the stitched image")
    term_a = perceptual_distance(s * ma, ia, fx)
    term_b = perceptual_distance(s * mb, ib, fx)
    grad = term_a.grads["a"] * ma + term_b.grads["a"] * mb
    return LossResult(term_a.value + term_b.value, {"stitched": grad})


def _masked_l1(s: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    denom = float(mask.sum()) * s.shape[1]
    if denom <= 0.0:
        return 0.0, np.zeros_like(s)
    diff = s * mask - target * mask
    return float(np.abs(diff).sum() / denom), np.sign(diff) * mask / denom


def seam_loss(
    stitched: ArrayLike,
    warped_a: ArrayLike,
    warped_b: ArrayLike,
    seam_a: ArrayLike,
    seam_b: ArrayLike,
) -> LossResult:
    """Masked mean absolute error against each warped input inside its seam band."""
    s = as_array(stitched)
    ia, ib = as_array(warped_a), as_array(warped_b)
    sa, sb = as_array(seam_a), as_array(seam_b)
    _same_shape(s, ia, "seam_loss")
    _same_shape(s, ib, "seam_loss")
    if sa.shape[2:] != s.shape[2:] or sb.shape[2:] != s.shape[2:]:
        raise ShapeMismatchError("seam_loss: seam masks do not match the stitched image")
    va, ga = _masked_l1(s, ia, sa)
    vb, gb = _masked_l1(s, ib, sb)
    return LossResult(va + vb, {"stitched": ga + gb})


def stage_total(content: Scalar, seam: Scalar, w: LossWeights) -> float:
    return w.lambda_c * _value(content) + w.lambda_s * _value(seam)


def consistency_loss(s_hr: ArrayLike, s_lr: ArrayLike) -> LossResult:
    """Mean absolute difference between the downsampled HR output and the LR output."""
    hr = as_array(s_hr)
    lr = as_array(s_lr)
    if hr.shape[:2] != lr.shape[:2]:
        raise ShapeMismatchError(f"consistency_loss: {hr.shape} vs {lr.shape}")
    if hr.shape[2] < lr.shape[2] or hr.shape[3] < lr.shape[3]:
        raise ShapeMismatchError(
            f"consistency_loss: s_hr {hr.shape[2:]} is smaller than s_lr {lr.shape[2:]}"
        )
    down = resize_bilinear(hr, lr.shape[2:])
    diff = down - lr
    n = diff.size
    sign = np.sign(diff) / n
    return LossResult(
        float(np.abs(diff).sum() / n),
        {"s_hr": resize_bilinear_backward(sign, hr.shape[2:]), "s_lr": -sign},
    )


def reconstruction_objective(l_lr: Scalar, l_hr: Scalar, l_cs: Scalar, w: LossWeights) -> float:
    return w.omega_lr * _value(l_lr) + w.omega_hr * _value(l_hr) + w.omega_cs * _value(l_cs)
