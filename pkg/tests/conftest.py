"""Shared fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from stitchkit.datakit import procedural_texture, render_synthetic_pair  # noqa: E402
from stitchkit.geometry import FourPointOffsets  # noqa: E402
from stitchkit.tensorcore.tensor import Tensor4  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def texture():
    """A 96x96 procedural RGB texture in [0, 1]."""
    return procedural_texture((96, 96), seed=5)


@pytest.fixture
def shifted_pair(texture):
    """64x64 reference and a target whose content sits 4 px to the right."""
    ref = texture[8:72, 8:72]
    target = texture[8:72, 12:76]
    return Tensor4.from_image(ref), Tensor4.from_image(target), FourPointOffsets.uniform(4.0, 0.0)


@pytest.fixture
def synthetic_pair():
    """64x64 pair rendered through a random homography, with its ground truth."""
    source = procedural_texture((96, 96), seed=11)
    ref, target, truth = render_synthetic_pair(source, 4.0, 64, np.random.default_rng(3))
    return Tensor4.from_image(ref), Tensor4.from_image(target), truth
