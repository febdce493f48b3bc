"""Four-point homographies, the DLT solve, point warping and stitching-domain canvases.

Coordinates are continuous pixel coordinates: an image of size (w, h) covers
[0, w] x [0, h] and pixel (row i, column j) has its centre at (j + 0.5, i + 0.5).
Corners are always ordered top-left, top-right, bottom-left, bottom-right.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .exceptions import DegenerateGeometryError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)

ImageSize = Tuple[int, int]  # (width, height)

MAX_CONDITION = 1e12
INFINITY_EPS = 1e-12


def corner_points(image_size: ImageSize) -> np.ndarray:
    """(4, 2) array of the image corners in TL, TR, BL, BR order."""
    w, h = image_size
    return np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]], dtype=np.float64)


@dataclass
class FourPointOffsets:
    """Corner displacements (dx_k, dy_k) as a (4, 2) array, TL, TR, BL, BR."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != 8:
            raise ValidationError(f"Four-point offsets need 8 scalars, got {values.size}")
        self.values = values.reshape(4, 2).copy()
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError("Four-point offsets contain NaN/Inf")

    @classmethod
    def zeros(cls) -> "FourPointOffsets":
        return cls(np.zeros((4, 2)))

    @classmethod
    def uniform(cls, dx: float, dy: float) -> "FourPointOffsets":
        return cls(np.tile([float(dx), float(dy)], (4, 1)))

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "FourPointOffsets":
        """From [dx1, dy1, dx2, dy2, ...]."""
        return cls(np.asarray(flat, dtype=np.float64).reshape(4, 2))

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1).copy()

    def to_list(self) -> List[List[float]]:
        return [[float(dx), float(dy)] for dx, dy in self.values]

    def is_zero(self) -> bool:
        return bool(np.all(self.values == 0.0))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FourPointOffsets):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


@dataclass
class Homography:
    """3x3 projective transform, normalized so that m[2][2] == 1."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise NonFiniteError("Homography contains NaN/Inf")
        if abs(m[2, 2]) < INFINITY_EPS:
            raise DegenerateGeometryError("Homography cannot be normalized: m[2][2] == 0")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-14:
            raise DegenerateGeometryError("Homography is singular (determinant ~ 0)")
        self.m = m

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Homography":
        """From 9 floats in row-major order."""
        if len(values) != 9:
            raise ValidationError(f"A homography needs 9 values, got {len(values)}")
        return cls(np.asarray(values, dtype=np.float64).reshape(3, 3))

    def to_list(self) -> List[float]:
        return [float(v) for v in self.m.reshape(-1)]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self . other (``other`` is applied first)."""
        return Homography(self.m @ other.m)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.m, np.eye(3)))

    def is_translation(self) -> bool:
        return bool(
            self.m[0, 0] == 1.0
            and self.m[1, 1] == 1.0
            and self.m[0, 1] == 0.0
            and self.m[1, 0] == 0.0
            and self.m[2, 0] == 0.0
            and self.m[2, 1] == 0.0
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Homography):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))


@dataclass(frozen=True)
class CanvasSpec:
    """Stitching-domain extent and the translation placing both images inside it."""

    width: int
    height: int
    origin_shift: Tuple[float, float]

    @property
    def size(self) -> ImageSize:
        return self.width, self.height

    @property
    def shape(self) -> Tuple[int, int]:
        """(height, width), numpy order."""
        return self.height, self.width

    def shift(self) -> Homography:
        return Homography.translation(*self.origin_shift)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "origin_shift": [float(self.origin_shift[0]), float(self.origin_shift[1])],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CanvasSpec":
        tx, ty = data["origin_shift"]
        return cls(int(data["width"]), int(data["height"]), (float(tx), float(ty)))


# ----------------------------------------------------------------------------- DLT


def _solve_pivoted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting; ``b`` may hold several columns."""
    n = a.shape[0]
    a = a.astype(np.float64).copy()
    b = np.asarray(b, dtype=np.float64).reshape(n, -1).copy()
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if a[pivot, col] == 0.0:
            raise DegenerateGeometryError("DLT system is singular")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        factors = a[col + 1 :, col] / a[col, col]
        a[col + 1 :] -= np.outer(factors, a[col])
        b[col + 1 :] -= np.outer(factors, b[col])
    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def _dlt_system(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        b[2 * k] = u
        b[2 * k + 1] = v
    return a, b


def _check_quad(dst: np.ndarray, scale: float) -> None:
    tol = 1e-9 * scale * scale
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                d1 = dst[j] - dst[i]
                d2 = dst[k] - dst[i]
                if abs(d1[0] * d2[1] - d1[1] * d2[0]) <= tol:
                    raise DegenerateGeometryError(
                        f"Displaced corners {i + 1}, {j + 1}, {k + 1} are collinear"
                    )


def _check_size(image_size: ImageSize) -> None:
    w, h = image_size
    if w < 2 or h < 2:
        raise ValidationError(f"Image size must be at least 2x2, got {w}x{h}")


def solve_dlt(offsets: FourPointOffsets, image_size: ImageSize) -> Homography:
    """Homography mapping each image corner to corner + offset."""
    _check_size(image_size)
    values = offsets.values
    if offsets.is_zero():
        return Homography.identity()
    if np.all(values == values[0]):
        return Homography.translation(values[0, 0], values[0, 1])

    w, h = image_size
    src = corner_points(image_size)
    dst = src + values
    _check_quad(dst, float(max(w, h)))

    # solve in unit-square coordinates, then conjugate back to pixels
    norm = np.diag([1.0 / w, 1.0 / h, 1.0])
    a, b = _dlt_system(src / [w, h], dst / [w, h])
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateGeometryError(f"DLT system is ill-conditioned (condition {cond:.3e})")
    hn = np.append(_solve_pivoted(a, b).reshape(-1), 1.0).reshape(3, 3)
    return Homography(np.linalg.inv(norm) @ hn @ norm)


def dlt_jacobian(offsets: FourPointOffsets, image_size: ImageSize) -> np.ndarray:
    """(8, 8) derivative of the 8 free entries of ``solve_dlt`` w.r.t. the flat offsets.

    Rows follow m.flat[:8]; columns follow [dx1, dy1, ..., dx4, dy4].
    """
    _check_size(image_size)
    src = corner_points(image_size)
    hom = solve_dlt(offsets, image_size)
    a, _ = _dlt_system(src, src + offsets.values)
    g, h_ = hom.m[2, 0], hom.m[2, 1]
    # d(row r of A h - b)/d(dst coordinate) reduces to a diagonal right-hand side
    rhs = np.zeros((8, 8))
    for k, (x, y) in enumerate(src):
        den = 1.0 + g * x + h_ * y
        rhs[2 * k, 2 * k] = den
        rhs[2 * k + 1, 2 * k + 1] = den
    return _solve_pivoted(a, rhs)


def warp_points(h: Homography, points: Iterable[Sequence[float]]) -> np.ndarray:
    """Apply ``h`` projectively to (n, 2) points."""
    pts = np.asarray(list(points) if not isinstance(points, np.ndarray) else points, dtype=np.float64)
    pts = pts.reshape(-1, 2)
    homog = np.column_stack([pts, np.ones(len(pts))]) @ h.m.T
    den = homog[:, 2]
    if np.any(np.abs(den) <= INFINITY_EPS):
        raise DegenerateGeometryError("Point maps to the line at infinity")
    return homog[:, :2] / den[:, None]


def canvas_from_corners(corners: np.ndarray) -> CanvasSpec:
    """Smallest canvas holding all ``corners``, with extents rounded up."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(corners)):
        raise NonFiniteError("Canvas corners contain NaN/Inf")
    min_x, min_y = corners.min(axis=0)
    max_x, max_y = corners.max(axis=0)
    width = int(math.ceil(max_x - min_x))
    height = int(math.ceil(max_y - min_y))
    return CanvasSpec(width, height, (float(-min_x) + 0.0, float(-min_y) + 0.0))


def canvas_extent(offsets: FourPointOffsets, image_size: ImageSize) -> CanvasSpec:
    """Stitching-domain canvas: the reference corners plus the displaced target corners."""
    corners = corner_points(image_size)
    return canvas_from_corners(np.vstack([corners, corners + offsets.values]))


def canvas_for_homography(h: Homography, image_size: ImageSize) -> CanvasSpec:
    corners = corner_points(image_size)
    return canvas_from_corners(np.vstack([corners, warp_points(h, corners)]))


def offsets_from_homography(h: Homography, image_size: ImageSize) -> FourPointOffsets:
    corners = corner_points(image_size)
    return FourPointOffsets(warp_points(h, corners) - corners)


def scale_offsets(offsets: FourPointOffsets, sx: float, sy: float) -> FourPointOffsets:
    """Rescale offsets to an image resized by (sx, sy)."""
    return FourPointOffsets(offsets.values * np.array([sx, sy]))
