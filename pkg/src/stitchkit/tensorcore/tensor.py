"""Rank-4 dense tensor used by every learned component."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from ..exceptions import NonFiniteError, ShapeMismatchError

Shape4 = Tuple[int, int, int, int]


@dataclass
class Tensor4:
    """Dense (batch, channels, height, width) float64 array with optional gradient."""

    data: np.ndarray
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        """Normalize storage and validate shape."""
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise ShapeMismatchError(
                f"Tensor4 requires 4 dimensions (b, c, h, w), got shape {data.shape}"
            )
        self.data = np.ascontiguousarray(data)
        if self.grad is not None:
            grad = np.asarray(self.grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeMismatchError(
                    f"Gradient shape {grad.shape} does not match data shape {self.data.shape}"
                )
            self.grad = np.ascontiguousarray(grad)

    @property
    def shape(self) -> Shape4:
        b, c, h, w = self.data.shape
        return (b, c, h, w)

    @property
    def spatial(self) -> Tuple[int, int]:
        """(height, width)."""
        return self.data.shape[2], self.data.shape[3]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Tensor4":
        grad = None if self.grad is None else self.grad.copy()
        return Tensor4(self.data.copy(), grad)

    def check_finite(self, where: str = "tensor") -> None:
        """Raise NonFiniteError if any value is NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"Non-finite value in {where}")

    @classmethod
    def zeros(cls, shape: Shape4) -> "Tensor4":
        return cls(np.zeros(shape, dtype=np.float64))

    @classmethod
    def ones(cls, shape: Shape4) -> "Tensor4":
        return cls(np.ones(shape, dtype=np.float64))

    @classmethod
    def from_image(cls, image: np.ndarray) -> "Tensor4":
        """Wrap an (h, w) or (h, w, c) image as a batch of one."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeMismatchError(f"Expected (h, w) or (h, w, c) image, got {arr.shape}")
        return cls(arr.transpose(2, 0, 1)[None])

    def to_image(self, index: int = 0) -> np.ndarray:
        """Return batch item ``index`` as an (h, w, c) array."""
        return self.data[index].transpose(1, 2, 0)


def as_array(value: "Tensor4 | np.ndarray") -> np.ndarray:
    """Return the float64 4-D array behind a Tensor4 or a raw array."""
    if isinstance(value, Tensor4):
        return value.data
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 4:
        raise ShapeMismatchError(f"Expected a 4-D array, got shape {arr.shape}")
    return arr
