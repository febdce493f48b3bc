"""Stitching-domain warping, content and seam masks, and overlap measurement.

``warp_image`` pulls every canvas pixel back through ``h^-1`` (after removing the canvas
origin shift) and samples the source bilinearly; neighbours outside the source count as 0.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .exceptions import DegenerateOverlapError, NonFiniteError, ShapeMismatchError
from .geometry import CanvasSpec, Homography, ImageSize
from .tensorcore.layers import resize_bilinear
from .tensorcore.tensor import Tensor4, as_array
from .utils.images import to_uint8, write_png

logger = logging.getLogger(__name__)

DILATIONS = 3


@dataclass
class SamplingPlan:
    """Bilinear gather for one (homography, canvas, source size) triple.

    ``index`` and ``weight`` have shape (4, n) over canvas pixels in row-major order and
    neighbours ordered (x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1); weights of
    out-of-range neighbours are 0.
    """

    canvas_shape: Tuple[int, int]
    source_shape: Tuple[int, int]
    index: np.ndarray
    weight: np.ndarray
    frac_x: np.ndarray
    frac_y: np.ndarray
    inside: np.ndarray  # (4, n) neighbour-in-range flags
    points: np.ndarray  # (n, 3) homogeneous canvas pixel centres with the shift removed
    source_xy: np.ndarray  # (n, 2) continuous source coordinates
    denominator: np.ndarray
    pullback: np.ndarray  # canvas (unshifted) -> source 3x3 map

    @classmethod
    def build(cls, h: Homography, canvas: CanvasSpec, source_shape: Tuple[int, int]) -> "SamplingPlan":
        src_h, src_w = source_shape
        tx, ty = canvas.origin_shift
        rows, cols = np.meshgrid(
            np.arange(canvas.height, dtype=np.float64),
            np.arange(canvas.width, dtype=np.float64),
            indexing="ij",
        )
        xs = cols.reshape(-1) + 0.5 - tx
        ys = rows.reshape(-1) + 0.5 - ty
        points = np.column_stack([xs, ys, np.ones_like(xs)])

        if h.is_translation():
            pullback = Homography.translation(-h.m[0, 2], -h.m[1, 2]).m
            sx = xs - h.m[0, 2]
            sy = ys - h.m[1, 2]
            den = np.ones_like(xs)
        else:
            pullback = h.inverse().m
            mapped = points @ pullback.T
            den = mapped[:, 2]
            safe = np.where(den > 1e-12, den, 1.0)
            sx = mapped[:, 0] / safe
            sy = mapped[:, 1] / safe

        behind = den <= 1e-12
        ix = sx - 0.5
        iy = sy - 0.5
        ix = np.where(behind, -10.0, ix)
        iy = np.where(behind, -10.0, iy)
        x0 = np.floor(ix)
        y0 = np.floor(iy)
        fx = ix - x0
        fy = iy - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)

        nx = np.stack([x0, x0 + 1, x0, x0 + 1])
        ny = np.stack([y0, y0, y0 + 1, y0 + 1])
        inside = (nx >= 0) & (nx < src_w) & (ny >= 0) & (ny < src_h) & ~behind[None, :]
        base = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
        weight = np.where(inside, base, 0.0)
        index = np.clip(ny, 0, src_h - 1) * src_w + np.clip(nx, 0, src_w - 1)
        return cls(
            canvas_shape=canvas.shape,
            source_shape=(src_h, src_w),
            index=index,
            weight=weight,
            frac_x=fx,
            frac_y=fy,
            inside=inside,
            points=points,
            source_xy=np.column_stack([sx, sy]),
            denominator=den,
            pullback=pullback,
        )

    def gather(self, image: np.ndarray) -> np.ndarray:
        b, c, _, _ = image.shape
        flat = image.reshape(b, c, -1)
        out = np.zeros((b, c, self.index.shape[1]))
        for k in range(4):
            out += self.weight[k] * flat[:, :, self.index[k]]
        return out.reshape(b, c, *self.canvas_shape)

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of ``gather``."""
        b, c = grad.shape[:2]
        g = grad.reshape(b, c, -1)
        size = self.source_shape[0] * self.source_shape[1]
        out = np.zeros((b, c, size))
        idx = self.index.reshape(-1)
        for bi in range(b):
            for ci in range(c):
                contrib = (self.weight * g[bi, ci][None, :]).reshape(-1)
                out[bi, ci] = np.bincount(idx, weights=contrib, minlength=size)
        return out.reshape(b, c, *self.source_shape)

    def coordinate_grads(self, image: np.ndarray, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """dL/dx and dL/dy of the continuous sample position per canvas pixel."""
        b, c = image.shape[:2]
        flat = image.reshape(b, c, -1)
        g = grad.reshape(b, c, -1)
        vals = [np.where(self.inside[k], flat[:, :, self.index[k]], 0.0) for k in range(4)]
        fx, fy = self.frac_x, self.frac_y
        d_dx = (vals[1] - vals[0]) * (1 - fy) + (vals[3] - vals[2]) * fy
        d_dy = (vals[2] - vals[0]) * (1 - fx) + (vals[3] - vals[1]) * fx
        return (d_dx * g).sum(axis=(0, 1)), (d_dy * g).sum(axis=(0, 1))


def _check_canvas_input(image: np.ndarray) -> None:
    if not np.all(np.isfinite(image)):
        raise NonFiniteError("warp_image input is not finite")


def warp_image(image: "Tensor4 | np.ndarray", h: Homography, canvas: CanvasSpec) -> Tensor4:
    """Warp ``image`` by ``h`` into ``canvas``; output shape (b, c, H*, W*)."""
    data = as_array(image)
    _check_canvas_input(data)
    plan = SamplingPlan.build(h, canvas, data.shape[2:])
    return Tensor4(plan.gather(data))


def warp_image_backward(
    grad: "Tensor4 | np.ndarray", h: Homography, canvas: CanvasSpec, source_shape: Tuple[int, int]
) -> Tensor4:
    """Gradient of a loss w.r.t. the source image given its gradient w.r.t. the warp."""
    g = as_array(grad)
    if g.shape[2:] != canvas.shape:
        raise ShapeMismatchError(f"Gradient shape {g.shape} does not match canvas {canvas.shape}")
    plan = SamplingPlan.build(h, canvas, source_shape)
    return Tensor4(plan.scatter(g))


def warp_homography_grad(
    image: "Tensor4 | np.ndarray",
    h: Homography,
    canvas: CanvasSpec,
    grad: "Tensor4 | np.ndarray",
    plan: Optional[SamplingPlan] = None,
) -> np.ndarray:
    """dL/dh (3x3) given dL/d(warp_image(image, h, canvas)).

    ``plan`` may pass in an already built plan for the same (h, canvas, source size).
    """
    data = as_array(image)
    if plan is None:
        plan = SamplingPlan.build(h, canvas, data.shape[2:])
    gx, gy = plan.coordinate_grads(data, as_array(grad))
    pts = plan.points
    den = plan.denominator
    ok = den > 1e-12
    gx = np.where(ok, gx, 0.0)
    gy = np.where(ok, gy, 0.0)
    inv_den = np.where(ok, 1.0 / np.where(ok, den, 1.0), 0.0)
    sx, sy = plan.source_xy[:, 0], plan.source_xy[:, 1]
    # source = (G0.p, G1.p) / G2.p with G the pullback map
    d_pullback = np.zeros((3, 3))
    d_pullback[0] = (gx * inv_den) @ pts
    d_pullback[1] = (gy * inv_den) @ pts
    d_pullback[2] = -((gx * sx + gy * sy) * inv_den) @ pts
    inv_t = plan.pullback.T
    return -inv_t @ d_pullback @ inv_t


# ----------------------------------------------------------------------------- masks


@dataclass
class MaskSet:
    """Content and seam masks of one aligned pair, each (1, 1, H*, W*)."""

    content_a: Tensor4
    content_b: Tensor4
    seam_a: Tensor4
    seam_b: Tensor4

    @property
    def shape(self) -> Tuple[int, int]:
        return self.content_a.spatial

    def resized(self, size: Tuple[int, int]) -> "MaskSet":
        """Bilinearly resampled copy, re-clipped to [0, 1]."""

        def rs(m: Tensor4) -> Tensor4:
            return Tensor4(np.clip(resize_bilinear(m.data, size), 0.0, 1.0))

        return MaskSet(rs(self.content_a), rs(self.content_b), rs(self.seam_a), rs(self.seam_b))


def content_mask(h: Homography, canvas: CanvasSpec, image_size: ImageSize) -> Tensor4:
    """Warp of an all-one image of ``image_size`` (width, height)."""
    w, hgt = image_size
    return warp_image(np.ones((1, 1, hgt, w)), h, canvas)


def _single_channel(m: "Tensor4 | np.ndarray", what: str) -> np.ndarray:
    data = as_array(m)
    if data.shape[1] != 1:
        raise ShapeMismatchError(f"{what} must be single-channel, got {data.shape[1]} channels")
    return data


def mask_gradient(m: "Tensor4 | np.ndarray") -> Tensor4:
    """|M[i,j] - M[i-1,j]| + |M[i,j] - M[i,j-1]|, neighbours outside the map read as 0."""
    data = _single_channel(m, "mask")
    up = np.zeros_like(data)
    left = np.zeros_like(data)
    up[:, :, 1:, :] = data[:, :, :-1, :]
    left[:, :, :, 1:] = data[:, :, :, :-1]
    return Tensor4(np.abs(data - up) + np.abs(data - left))


def box_dilate(m: np.ndarray) -> np.ndarray:
    """Convolve with the 3x3 all-one kernel, zero padding, unnormalized."""
    h, w = m.shape[2], m.shape[3]
    padded = np.pad(m, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros_like(m)
    for di in range(3):
        for dj in range(3):
            acc = acc + padded[:, :, di : di + h, dj : dj + w]
    return acc


def seam_band(content_other: "Tensor4 | np.ndarray") -> np.ndarray:
    band = mask_gradient(content_other).data
    for _ in range(DILATIONS):
        band = box_dilate(band)
    return np.clip(band, 0.0, 1.0)


def seam_masks(content_a: "Tensor4 | np.ndarray", content_b: "Tensor4 | np.ndarray") -> Tuple[Tensor4, Tensor4]:
    """Seam masks: the clipped triple dilation of the other mask's edges, times own content."""
    a = _single_channel(content_a, "content_a")
    b = _single_channel(content_b, "content_b")
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Content masks differ in shape: {a.shape} vs {b.shape}")
    return Tensor4(seam_band(b) * a), Tensor4(seam_band(a) * b)


def masks_for(h: Homography, canvas: CanvasSpec, image_size: ImageSize) -> MaskSet:
    """Full MaskSet for a reference (identity) and a target warped by ``h``."""
    content_a = content_mask(Homography.identity(), canvas, image_size)
    content_b = content_mask(h, canvas, image_size)
    seam_a, seam_b = seam_masks(content_a, content_b)
    return MaskSet(content_a, content_b, seam_a, seam_b)


def overlap_rate(content_a: "Tensor4 | np.ndarray", content_b: "Tensor4 | np.ndarray") -> float:
    """Overlap area relative to the area of ``content_a``."""
    a = as_array(content_a)
    b = as_array(content_b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Content masks differ in shape: {a.shape} vs {b.shape}")
    area = float(a.sum())
    if area <= 0.0:
        raise DegenerateOverlapError("content_a has zero area")
    return float(np.clip((a * b).sum() / area, 0.0, 1.0))


def export_mask(mask: "Tensor4 | np.ndarray", path: Path) -> None:
    """Write a single-channel mask as an 8-bit grayscale PNG."""
    data = _single_channel(mask, "mask")
    write_png(Path(path), to_uint8(data[0, 0]))
    logger.debug("Wrote mask %s", path)
