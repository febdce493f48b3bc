"""Synthetic pair generation, real-pair ingestion, image files and dataset manifests.

Datasets live in one directory: ``reference/<id>.png`` and ``target/<id>.png`` plus a
``manifest.json`` whose paths are relative to the manifest itself.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .evalkit import OverlapLevel, ParallaxLevel, classify_overlap
from .exceptions import DataError, FileOperationError, InputTooSmallError, ValidationError
from .geometry import CanvasSpec, FourPointOffsets, Homography, canvas_extent, solve_dlt
from .tensorcore.tensor import Tensor4, as_array
from .utils.images import read_rgb, to_uint8, write_png
from .utils.io import ensure_directory_exists, read_json, write_json
from .utils.seeding import derive_seed, rng_for
from .warpmask import masks_for, overlap_rate, warp_image

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
REFERENCE_DIR = "reference"
TARGET_DIR = "target"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
# value-noise cell sizes in pixels, coarsest first; halved amplitude per octave
TEXTURE_CELLS = (64, 32, 16)
JITTER_GAIN = (0.8, 1.2)
JITTER_BIAS = (-0.05, 0.05)


@dataclass
class PairRecord:
    """One reference/target pair; ``truth_offsets`` is set for synthetic pairs only."""

    id: str
    ref_path: Path
    target_path: Path
    truth_offsets: Optional[FourPointOffsets] = None
    overlap_level: Optional[str] = None
    parallax_level: Optional[str] = None

    @property
    def synthetic(self) -> bool:
        return self.truth_offsets is not None

    def to_dict(self, root: Path) -> Dict[str, Any]:
        return {
            "id": self.id,
            "ref": _relative(self.ref_path, root),
            "target": _relative(self.target_path, root),
            "truth_offsets": None if self.truth_offsets is None else self.truth_offsets.to_list(),
            "overlap_level": self.overlap_level,
            "parallax_level": self.parallax_level,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], root: Path) -> "PairRecord":
        truth = data.get("truth_offsets")
        return cls(
            id=str(data["id"]),
            ref_path=root / data["ref"],
            target_path=root / data["target"],
            truth_offsets=None if truth is None else FourPointOffsets(np.asarray(truth, dtype=np.float64)),
            overlap_level=data.get("overlap_level"),
            parallax_level=data.get("parallax_level"),
        )


@dataclass
class DatasetManifest:
    records: List[PairRecord] = field(default_factory=list)
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise DataError("Duplicate record id in manifest", record.id)
            seen.add(record.id)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class LoadedPair:
    record: PairRecord
    ref: Tensor4
    target: Tensor4


def _relative(path: Path, root: Path) -> str:
    try:
        return Path(os.path.relpath(path, root)).as_posix()
    except ValueError:
        return Path(path).as_posix()


# ----------------------------------------------------------------------------- manifests


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    path = Path(path)
    root = path.parent
    write_json(
        path,
        {
            "version": MANIFEST_VERSION,
            "seed": manifest.seed,
            "params": manifest.params,
            "records": [r.to_dict(root) for r in manifest.records],
        },
    )
    logger.info("Wrote manifest with %d records to %s", len(manifest), path)


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    data = read_json(path)
    if not isinstance(data, dict) or "records" not in data:
        raise FileOperationError(f"{path} is not a dataset manifest")
    version = data.get("version", MANIFEST_VERSION)
    if version != MANIFEST_VERSION:
        raise FileOperationError(f"Unsupported manifest version {version} in {path}")
    root = path.parent
    return DatasetManifest(
        records=[PairRecord.from_dict(r, root) for r in data["records"]],
        seed=data.get("seed"),
        params=dict(data.get("params") or {}),
    )


# ----------------------------------------------------------------------------- image files


def load_image(path: Path, record_id: Optional[str] = None) -> Tensor4:
    """Decode an 8-bit image to a (1, 3, h, w) tensor in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Missing image file {path}", record_id)
    try:
        pixels = read_rgb(path)
    except FileOperationError as e:
        raise DataError(str(e), record_id)
    return Tensor4.from_image(pixels.astype(np.float64) / 255.0)


def save_image(tensor: "Tensor4 | np.ndarray", path: Path) -> None:
    """Write the first batch item of a 1- or 3-channel tensor as an 8-bit PNG."""
    data = as_array(tensor)
    if data.shape[1] not in (1, 3):
        raise ValidationError(f"save_image expects 1 or 3 channels, got {data.shape[1]}")
    write_png(Path(path), to_uint8(data[0].transpose(1, 2, 0)))


def load_dataset(manifest_path: Path) -> List[LoadedPair]:
    manifest = read_manifest(Path(manifest_path))
    pairs = []
    for record in manifest.records:
        ref = load_image(record.ref_path, record.id)
        target = load_image(record.target_path, record.id)
        if ref.shape != target.shape:
            raise DataError(
                f"Reference {ref.spatial} and target {target.spatial} sizes differ", record.id
            )
        pairs.append(LoadedPair(record, ref, target))
    logger.info("Loaded %d pairs from %s", len(pairs), manifest_path)
    return pairs


def ingest_directory(root: Path) -> DatasetManifest:
    """Pair ``root/reference/*`` with same-named files in ``root/target/``."""
    root = Path(root)
    ref_dir = root / REFERENCE_DIR
    tgt_dir = root / TARGET_DIR
    for d in (ref_dir, tgt_dir):
        if not d.is_dir():
            raise FileOperationError(f"Expected directory {d}")
    records = []
    for ref_path in sorted(ref_dir.iterdir()):
        if ref_path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        target_path = tgt_dir / ref_path.name
        if not target_path.exists():
            raise DataError(f"No target image for {ref_path.name}", ref_path.stem)
        records.append(PairRecord(ref_path.stem, ref_path, target_path))
    logger.info("Ingested %d real pairs from %s", len(records), root)
    return DatasetManifest(records=records)


# ----------------------------------------------------------------------------- synthesis


def procedural_texture(size: Tuple[int, int], seed: int) -> np.ndarray:
    """Seeded multi-octave value noise, (h, w, 3) in [0, 1].

    Each octave interpolates a random lattice with smoothstep weights so the texture
    has continuous gradients everywhere.
    """
    h, w = size
    rng = rng_for(seed, "texture")
    out = np.zeros((h, w, 3))
    amplitude = 1.0
    for cell in TEXTURE_CELLS:
        gy, gx = h // cell + 2, w // cell + 2
        lattice = rng.random((gy, gx, 3))
        ys = (np.arange(h) + 0.5) / cell
        xs = (np.arange(w) + 0.5) / cell
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        ty = ys - y0
        tx = xs - x0
        sy = (ty * ty * (3 - 2 * ty))[:, None, None]
        sx = (tx * tx * (3 - 2 * tx))[None, :, None]
        top = lattice[y0][:, x0] * (1 - sx) + lattice[y0][:, x0 + 1] * sx
        bottom = lattice[y0 + 1][:, x0] * (1 - sx) + lattice[y0 + 1][:, x0 + 1] * sx
        out += amplitude * (top * (1 - sy) + bottom * sy)
        amplitude *= 0.5
    lo = out.min(axis=(0, 1), keepdims=True)
    hi = out.max(axis=(0, 1), keepdims=True)
    return 0.05 + 0.9 * (out - lo) / np.maximum(hi - lo, 1e-12)


def jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-image photometric gain and bias, clipped to [0, 1]."""
    gain = rng.uniform(*JITTER_GAIN)
    bias = rng.uniform(*JITTER_BIAS)
    return np.clip(image * gain + bias, 0.0, 1.0)


def render_synthetic_pair(
    source: np.ndarray,
    disturbance: float,
    crop_size: int,
    rng: np.random.Generator,
    photometric_jitter: bool = False,
) -> Tuple[np.ndarray, np.ndarray, FourPointOffsets]:
    """Crop a reference from ``source`` and render the target through a random homography.

    ``source`` is (h, w, 3) in [0, 1]. The target satisfies
    target(p) = source(crop_origin + H(p)) with H = solve_dlt(truth), so warping the target
    by the returned offsets lands it on the reference.
    """
    if disturbance < 0:
        raise ValidationError(f"Disturbance must be non-negative, got {disturbance}")
    src_h, src_w = source.shape[:2]
    margin = int(np.ceil(disturbance))
    need = crop_size + 2 * margin
    if src_h < need or src_w < need:
        raise InputTooSmallError(
            f"Source {src_w}x{src_h} is too small for crop {crop_size} with disturbance {disturbance}"
        )
    x0 = int(rng.integers(margin, src_w - crop_size - margin + 1))
    y0 = int(rng.integers(margin, src_h - crop_size - margin + 1))
    if disturbance > 0:
        truth = FourPointOffsets(rng.uniform(-disturbance, disturbance, size=(4, 2)))
    else:
        truth = FourPointOffsets.zeros()

    h = solve_dlt(truth, (crop_size, crop_size))
    if h.is_translation():
        source_to_target = Homography.translation(-(x0 + h.m[0, 2]), -(y0 + h.m[1, 2]))
    else:
        source_to_target = Homography.translation(x0, y0).compose(h).inverse()
    src = Tensor4.from_image(source)
    target = warp_image(src, source_to_target, CanvasSpec(crop_size, crop_size, (0.0, 0.0))).to_image()
    reference = source[y0 : y0 + crop_size, x0 : x0 + crop_size]
    if photometric_jitter:
        target = jitter(target, rng)
    return np.ascontiguousarray(reference), np.ascontiguousarray(target), truth


def _levels(truth: FourPointOffsets, crop_size: int) -> Tuple[str, str]:
    size = (crop_size, crop_size)
    masks = masks_for(solve_dlt(truth, size), canvas_extent(truth, size), size)
    rate = overlap_rate(masks.content_a, masks.content_b)
    # one global homography explains a synthetic pair exactly
    return classify_overlap(rate).value, ParallaxLevel.SMALL.value


def gen_synthetic_pair(
    source: np.ndarray,
    disturbance: float,
    crop_size: int,
    seed: int,
    out_dir: Path,
    record_id: str = "pair_0000",
    photometric_jitter: bool = False,
) -> PairRecord:
    """Render one synthetic pair and write it under ``out_dir``."""
    out_dir = Path(out_dir)
    rng = rng_for(seed, "synth", record_id)
    ref, target, truth = render_synthetic_pair(source, disturbance, crop_size, rng, photometric_jitter)
    ref_path = out_dir / REFERENCE_DIR / f"{record_id}.png"
    target_path = out_dir / TARGET_DIR / f"{record_id}.png"
    write_png(ref_path, to_uint8(ref))
    write_png(target_path, to_uint8(target))
    overlap_level, parallax_level = _levels(truth, crop_size)
    return PairRecord(record_id, ref_path, target_path, truth, overlap_level, parallax_level)


def generate_dataset(
    out_dir: Path,
    count: int,
    disturbance: float,
    crop_size: int,
    seed: int,
    source: Optional[np.ndarray] = None,
    photometric_jitter: bool = False,
) -> DatasetManifest:
    """Write ``count`` synthetic pairs and their manifest into ``out_dir``.

    Without a ``source`` photograph every pair gets its own procedural texture.
    """
    if count < 1:
        raise ValidationError(f"Pair count must be positive, got {count}")
    out_dir = ensure_directory_exists(Path(out_dir))
    side = crop_size + 2 * int(np.ceil(disturbance)) + TEXTURE_CELLS[-1]
    records = []
    for i in range(count):
        record_id = f"pair_{i:04d}"
        image = source if source is not None else procedural_texture((side, side), derive_seed(seed, "source", i))
        records.append(
            gen_synthetic_pair(image, disturbance, crop_size, seed, out_dir, record_id, photometric_jitter)
        )
    manifest = DatasetManifest(
        records=records,
        seed=seed,
        params={
            "count": count,
            "disturbance": disturbance,
            "crop_size": crop_size,
            "jitter": photometric_jitter,
            "source": "photograph" if source is not None else "procedural",
        },
    )
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    levels = [r.overlap_level for r in records]
    logger.info(
        "Generated %d pairs (%s)",
        count,
        ", ".join(f"{lvl.value}={levels.count(lvl.value)}" for lvl in OverlapLevel),
    )
    return manifest
