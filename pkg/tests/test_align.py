"""Tests for coarse-to-fine direct alignment."""

import json

import numpy as np
import pytest

from stitchkit.align import (
    AlignmentResult,
    PyramidConfig,
    align_pair,
    build_pyramid,
    compose_alignment,
    estimate_offsets,
    max_levels,
    to_luma,
)
from stitchkit.datakit import procedural_texture, render_synthetic_pair
from stitchkit.evalkit import four_pt_rmse
from stitchkit.exceptions import InputTooSmallError, NonFiniteError, ShapeMismatchError, ValidationError
from stitchkit.geometry import FourPointOffsets
from stitchkit.tensorcore.tensor import Tensor4

FAST = PyramidConfig(levels=2, iterations_per_level=120)


class TestPyramid:
    """Test the luma pyramid helpers."""

    def test_luma_weights(self):
        """Test the luma conversion of a pure colour."""
        image = np.zeros((1, 3, 2, 2))
        image[:, 1] = 1.0
        assert np.allclose(to_luma(image), 0.587)
        assert to_luma(image).shape == (1, 1, 2, 2)

    def test_single_channel_passthrough(self):
        """Test that grey input is returned unchanged."""
        image = np.ones((1, 1, 4, 4))
        assert to_luma(image) is image

    def test_level_sizes(self):
        """Test that each level halves the previous one."""
        pyramid = build_pyramid(np.zeros((1, 1, 64, 48)), 3)
        assert [p.shape[2:] for p in pyramid] == [(64, 48), (32, 24), (16, 12)]

    def test_max_levels(self):
        """Test the level cap for common sizes."""
        assert max_levels(32, 32) == 3
        assert max_levels(128, 96) == 4


class TestInputs:
    """Test input validation."""

    def test_shape_mismatch(self):
        """Test that differently sized images are rejected."""
        with pytest.raises(ShapeMismatchError):
            estimate_offsets(np.zeros((1, 3, 64, 64)), np.zeros((1, 3, 64, 32)))

    def test_too_small(self):
        """Test that images under 32 px are rejected."""
        with pytest.raises(InputTooSmallError):
            estimate_offsets(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)))

    def test_too_many_levels(self):
        """Test that the pyramid depth is capped by the image size."""
        with pytest.raises(ValidationError):
            estimate_offsets(np.zeros((1, 3, 64, 64)), np.zeros((1, 3, 64, 64)), PyramidConfig(levels=5))

    def test_non_finite(self):
        """Test that NaN pixels are rejected."""
        ref = np.zeros((1, 3, 64, 64))
        target = ref.copy()
        target[0, 0, 3, 3] = np.nan
        with pytest.raises(NonFiniteError):
            estimate_offsets(ref, target)


class TestEstimateOffsets:
    """Test recovery of known geometry."""

    def test_identical_images(self, shifted_pair):
        """Test that identical images keep the zero offsets."""
        ref, _, _ = shifted_pair
        result = align_pair(ref, ref, FAST)
        assert result.offsets == FourPointOffsets.zeros()
        assert result.final_loss == 0.0
        assert not result.degenerate

    def test_recovers_translation(self, shifted_pair):
        """Test that a 4 px shift is recovered to sub-pixel accuracy."""
        ref, target, truth = shifted_pair
        estimated = estimate_offsets(ref, target, FAST)
        assert four_pt_rmse(estimated, truth) < 1.0
        assert four_pt_rmse(estimated, truth) < four_pt_rmse(FourPointOffsets.zeros(), truth)

    def test_recovers_homography(self, synthetic_pair):
        """Test that a random corner disturbance is mostly undone."""
        ref, target, truth = synthetic_pair
        result = align_pair(ref, target, FAST)
        baseline = four_pt_rmse(FourPointOffsets.zeros(), truth)
        assert four_pt_rmse(result.offsets, truth) < 0.5 * baseline
        assert result.final_loss <= result.identity_loss

    def test_single_level_trace_decreases(self, synthetic_pair):
        """Test that accepted steps never raise the loss within a level."""
        ref, target, _ = synthetic_pair
        result = align_pair(ref, target, PyramidConfig(levels=1, iterations_per_level=60))
        trace = result.loss_trace
        assert trace
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_deterministic(self, synthetic_pair):
        """Test that two runs give bitwise equal offsets."""
        ref, target, _ = synthetic_pair
        first = estimate_offsets(ref, target, FAST)
        second = estimate_offsets(ref, target, FAST)
        assert np.array_equal(first.values, second.values)

    def test_warm_start(self, shifted_pair):
        """Test that starting from the answer stays there."""
        ref, target, truth = shifted_pair
        estimated = estimate_offsets(ref, target, FAST, init=truth)
        assert four_pt_rmse(estimated, truth) < 0.25


class TestComposeAlignment:
    """Test warping into the stitching domain."""

    def test_zero_offsets(self, shifted_pair):
        """Test that zero offsets reproduce both inputs on their own frame."""
        ref, target, _ = shifted_pair
        result = compose_alignment(ref, target, FourPointOffsets.zeros())
        assert result.canvas.size == (64, 64)
        assert np.array_equal(result.warped_a.data, ref.data)
        assert np.array_equal(result.warped_b.data, target.data)
        assert result.image_size == (64, 64)

    def test_shift_widens_canvas(self, shifted_pair):
        """Test the canvas and mask shapes for the shifted pair."""
        ref, target, truth = shifted_pair
        result = compose_alignment(ref, target, truth)
        assert result.canvas.size == (68, 64)
        assert result.masks.content_a.shape == (1, 1, 64, 68)
        # the warped target agrees with the reference on the overlap
        overlap = result.warped_a.data[..., 4:64]
        assert np.allclose(overlap, result.warped_b.data[..., 4:64])

    def test_to_dict_is_json(self, shifted_pair):
        """Test that the serialized result is plain JSON."""
        ref, target, truth = shifted_pair
        data = compose_alignment(ref, target, truth, final_loss=0.5, trace=[1.0, 0.5]).to_dict()
        assert set(data) == {
            "offsets",
            "homography",
            "canvas",
            "final_loss",
            "identity_loss",
            "degenerate",
            "loss_trace",
        }
        assert json.loads(json.dumps(data))["loss_trace"] == [1.0, 0.5]
        assert isinstance(compose_alignment(ref, target, truth), AlignmentResult)


@pytest.mark.slow
class TestBatchAlignment:
    """Test alignment accuracy across a seeded batch."""

    def test_batch_beats_identity(self):
        """Test that the mean corner error falls well below the identity's."""
        estimated_errors, identity_errors = [], []
        for seed in range(6):
            source = procedural_texture((112, 112), seed=100 + seed)
            ref, target, truth = render_synthetic_pair(source, 6.0, 96, np.random.default_rng(seed))
            offsets = estimate_offsets(Tensor4.from_image(ref), Tensor4.from_image(target))
            estimated_errors.append(four_pt_rmse(offsets, truth))
            identity_errors.append(four_pt_rmse(FourPointOffsets.zeros(), truth))
        assert np.mean(estimated_errors) < 0.5 * np.mean(identity_errors)
