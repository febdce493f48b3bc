"""8-bit image encoding and decoding with Pillow."""

import io
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..exceptions import FileOperationError, ValidationError
from .io import safe_read_bytes, safe_write_bytes


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], scale by 255 and round half to even."""
    arr = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8)


def encode_png(pixels: np.ndarray) -> bytes:
    """PNG bytes for an (h, w), (h, w, 1) or (h, w, 3) uint8 array; no metadata chunks."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValidationError(f"PNG encoding needs uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if not (pixels.ndim == 2 or (pixels.ndim == 3 and pixels.shape[2] == 3)):
        raise ValidationError(f"Expected 1 or 3 channels, got shape {pixels.shape}")
    image = Image.fromarray(np.ascontiguousarray(pixels))
    buffer = io.BytesIO()
    image.save(buffer, format="PNG", optimize=False, compress_level=6)
    return buffer.getvalue()


def write_png(path: Path, pixels: np.ndarray) -> None:
    safe_write_bytes(Path(path), encode_png(pixels))


def read_rgb(path: Path) -> np.ndarray:
    """Decode a PNG/JPEG file to an (h, w, 3) uint8 array."""
    blob = safe_read_bytes(Path(path))
    try:
        with Image.open(io.BytesIO(blob)) as image:
            return np.asarray(image.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError) as e:
        raise FileOperationError(f"Cannot decode image {path}: {e}")
