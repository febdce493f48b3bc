"""Tests for four-point offsets, the DLT solve and canvas extents."""

import math

import numpy as np
import pytest

from stitchkit.exceptions import DegenerateGeometryError, NonFiniteError, ValidationError
from stitchkit.geometry import (
    CanvasSpec,
    FourPointOffsets,
    Homography,
    canvas_extent,
    canvas_for_homography,
    corner_points,
    dlt_jacobian,
    offsets_from_homography,
    scale_offsets,
    solve_dlt,
    warp_points,
)


def random_offsets(rng, disturbance):
    return FourPointOffsets(rng.uniform(-disturbance, disturbance, size=(4, 2)))


class TestFourPointOffsets:
    """Test the offset container."""

    def test_needs_eight_scalars(self):
        """Test that anything but 8 values is rejected."""
        with pytest.raises(ValidationError):
            FourPointOffsets(np.zeros(6))

    def test_rejects_nan(self):
        """Test that non-finite offsets are rejected."""
        with pytest.raises(NonFiniteError):
            FourPointOffsets.from_flat([0, 0, 0, 0, 0, 0, 0, np.nan])

    def test_flat_order(self):
        """Test that the flat layout interleaves dx and dy per corner."""
        offsets = FourPointOffsets.from_flat([1, 2, 3, 4, 5, 6, 7, 8])
        assert offsets.values[1].tolist() == [3.0, 4.0]
        assert offsets.flat().tolist() == [1, 2, 3, 4, 5, 6, 7, 8]

    def test_corner_order(self):
        """Test the TL, TR, BL, BR corner order."""
        assert corner_points((4, 3)).tolist() == [[0, 0], [4, 0], [0, 3], [4, 3]]


class TestHomography:
    """Test the homography value type."""

    def test_normalized(self):
        """Test that m[2][2] is scaled to 1."""
        h = Homography(np.eye(3) * 2.0)
        assert h.m[2, 2] == 1.0
        assert h.is_identity()

    def test_zero_corner_entry(self):
        """Test that m[2][2] == 0 cannot be normalized."""
        m = np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 0]])
        with pytest.raises(DegenerateGeometryError):
            Homography(m)

    def test_singular(self):
        """Test that a singular matrix is rejected."""
        with pytest.raises(DegenerateGeometryError):
            Homography(np.array([[1.0, 2, 0], [2, 4, 0], [0, 0, 1]]))

    def test_list_round_trip(self):
        """Test the 9-float row-major serialization."""
        h = Homography.translation(3.0, -2.0)
        assert Homography.from_list(h.to_list()) == h
        with pytest.raises(ValidationError):
            Homography.from_list([1.0] * 8)

    def test_compose_order(self):
        """Test that compose applies its argument first."""
        scale = Homography(np.diag([2.0, 2.0, 1.0]))
        shift = Homography.translation(1.0, 0.0)
        assert warp_points(scale.compose(shift), [(1.0, 1.0)]).tolist() == [[4.0, 2.0]]


class TestWarpPoints:
    """Test projective point mapping."""

    def test_identity(self):
        """Test that identity leaves points unchanged."""
        pts = np.array([[1.5, 2.5], [-3.0, 7.0]])
        assert np.array_equal(warp_points(Homography.identity(), pts), pts)

    def test_scaling(self):
        """Test a pure scaling matrix."""
        h = Homography(np.diag([2.0, 2.0, 1.0]))
        assert warp_points(h, [(3.0, 4.0)]).tolist() == [[6.0, 8.0]]

    def test_line_at_infinity(self):
        """Test that points on the vanishing line are rejected."""
        h = Homography(np.array([[1.0, 0, 0], [0, 1, 0], [1, 0, 1]]))
        with pytest.raises(DegenerateGeometryError):
            warp_points(h, [(-1.0, 0.0)])

    def test_composition(self, rng):
        """Test warp_points(H1 H2) == warp_points(H1) after warp_points(H2)."""
        for _ in range(20):
            h1 = solve_dlt(random_offsets(rng, 16), (128, 128))
            h2 = solve_dlt(random_offsets(rng, 16), (128, 128))
            pts = rng.uniform(0, 128, size=(10, 2))
            direct = warp_points(h1.compose(h2), pts)
            chained = warp_points(h1, warp_points(h2, pts))
            assert np.max(np.abs(direct - chained)) < 1e-9


class TestSolveDlt:
    """Test the four-point DLT solve."""

    def test_zero_offsets_identity(self):
        """Test that zero offsets give exactly the identity."""
        assert solve_dlt(FourPointOffsets.zeros(), (128, 128)).is_identity()

    def test_uniform_offsets_translation(self):
        """Test that uniform offsets give an exact translation."""
        h = solve_dlt(FourPointOffsets.uniform(5.0, -3.0), (64, 48))
        assert h == Homography.translation(5.0, -3.0)

    def test_round_trip(self):
        """Test corner round trips on 1000 seeded draws."""
        rng = np.random.default_rng(2024)
        corners = corner_points((128, 128))
        worst = 0.0
        for _ in range(1000):
            offsets = random_offsets(rng, 32)
            h = solve_dlt(offsets, (128, 128))
            worst = max(worst, float(np.max(np.abs(warp_points(h, corners) - corners - offsets.values))))
        assert worst < 1e-6

    def test_non_square_image(self, rng):
        """Test the round trip on a non-square image."""
        offsets = random_offsets(rng, 10)
        h = solve_dlt(offsets, (200, 80))
        corners = corner_points((200, 80))
        assert np.allclose(warp_points(h, corners), corners + offsets.values, atol=1e-6)

    def test_collinear_corners(self):
        """Test that three collinear displaced corners are degenerate."""
        values = np.zeros((4, 2))
        values[2] = [64.0, -128.0]  # bottom-left lands between top-left and top-right
        with pytest.raises(DegenerateGeometryError):
            solve_dlt(FourPointOffsets(values), (128, 128))

    def test_tiny_image(self):
        """Test that images below 2x2 are rejected."""
        with pytest.raises(ValidationError):
            solve_dlt(FourPointOffsets.zeros(), (1, 5))

    def test_offsets_from_homography(self, rng):
        """Test that offsets recovered from the solved matrix match the input."""
        offsets = random_offsets(rng, 20)
        recovered = offsets_from_homography(solve_dlt(offsets, (96, 96)), (96, 96))
        assert np.allclose(recovered.values, offsets.values, atol=1e-6)

    def test_jacobian_matches_differences(self, rng):
        """Test dlt_jacobian against central differences of solve_dlt."""
        size = (64, 64)
        offsets = random_offsets(rng, 8)
        jac = dlt_jacobian(offsets, size)
        step = 1e-4
        numeric = np.zeros((8, 8))
        for k in range(8):
            up = offsets.flat()
            down = offsets.flat()
            up[k] += step
            down[k] -= step
            m_up = solve_dlt(FourPointOffsets.from_flat(up), size).m.reshape(-1)[:8]
            m_down = solve_dlt(FourPointOffsets.from_flat(down), size).m.reshape(-1)[:8]
            numeric[:, k] = (m_up - m_down) / (2 * step)
        assert np.allclose(jac, numeric, rtol=1e-5, atol=1e-9)

    def test_scale_offsets(self):
        """Test rescaling offsets to a resized image."""
        scaled = scale_offsets(FourPointOffsets.uniform(4.0, 2.0), 0.5, 0.25)
        assert scaled == FourPointOffsets.uniform(2.0, 0.5)


class TestCanvasExtent:
    """Test the stitching-domain canvas."""

    def test_zero_offsets(self):
        """Test that zero offsets give the image size and no shift."""
        canvas = canvas_extent(FourPointOffsets.zeros(), (128, 128))
        assert (canvas.width, canvas.height, canvas.origin_shift) == (128, 128, (0.0, 0.0))

    def test_right_shift(self):
        """Test that a uniform right shift widens the canvas."""
        canvas = canvas_extent(FourPointOffsets.uniform(32.0, 0.0), (128, 128))
        assert (canvas.width, canvas.height, canvas.origin_shift) == (160, 128, (0.0, 0.0))

    def test_left_shift_moves_origin(self):
        """Test that content left of the reference shifts the origin."""
        canvas = canvas_extent(FourPointOffsets.uniform(-10.0, 5.0), (50, 40))
        assert canvas.size == (60, 45)
        assert canvas.origin_shift == (10.0, 0.0)

    def test_matches_brute_force(self):
        """Test against an independent min/max scan over the eight corners."""
        rng = np.random.default_rng(99)
        for _ in range(1000):
            offsets = random_offsets(rng, 32)
            xs, ys = [], []
            for k, (cx, cy) in enumerate([(0, 0), (128, 0), (0, 128), (128, 128)]):
                xs += [cx, cx + offsets.values[k][0]]
                ys += [cy, cy + offsets.values[k][1]]
            canvas = canvas_extent(offsets, (128, 128))
            assert canvas.width == math.ceil(max(xs) - min(xs))
            assert canvas.height == math.ceil(max(ys) - min(ys))
            assert canvas.origin_shift == (-min(xs), -min(ys))

    def test_corners_inside(self, rng):
        """Test that every shifted corner lies inside the canvas."""
        for _ in range(50):
            offsets = random_offsets(rng, 32)
            canvas = canvas_extent(offsets, (128, 128))
            corners = np.vstack([corner_points((128, 128)), corner_points((128, 128)) + offsets.values])
            shifted = corners + np.array(canvas.origin_shift)
            assert shifted.min() >= 0.0
            assert np.all(shifted[:, 0] <= canvas.width) and np.all(shifted[:, 1] <= canvas.height)

    def test_swap_invariance_for_translations(self):
        """Test that swapping the roles of a translated pair keeps the canvas size."""
        forward = canvas_extent(FourPointOffsets.uniform(12.5, -7.0), (64, 64))
        backward = canvas_extent(FourPointOffsets.uniform(-12.5, 7.0), (64, 64))
        assert forward.size == backward.size

    def test_matches_homography_canvas(self, rng):
        """Test that the offset and homography routes agree."""
        offsets = random_offsets(rng, 16)
        by_offsets = canvas_extent(offsets, (64, 64))
        by_matrix = canvas_for_homography(solve_dlt(offsets, (64, 64)), (64, 64))
        assert by_offsets.size == by_matrix.size

    def test_dict_round_trip(self):
        """Test the JSON form of a canvas."""
        canvas = CanvasSpec(70, 65, (6.0, 1.5))
        assert CanvasSpec.from_dict(canvas.to_dict()) == canvas
