import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdr.grid import GridError, GridGeometry, LandmarkSet, ScalarGrid
from gdr.metrics import (
    MetricReport,
    jacobian_error,
    masked_ssd,
    mean_landmark_error,
    mean_mlv,
    mlv,
)


def geo2d(n=8):
    return GridGeometry((n, n), (1.0, 1.0), (0.0, 0.0))


class TestJacobianError:
    def test_identical_zero(self):
        g = ScalarGrid(geo2d(), np.random.default_rng(0).normal(size=(8, 8)))
        assert jacobian_error(g, g) == 0.0

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        a = ScalarGrid(geo2d(), rng.normal(size=(8, 8)))
        b = ScalarGrid(a.geometry, a.values + 0.1)
        assert jacobian_error(a, b) == pytest.approx(0.1)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        a = ScalarGrid(geo2d(), rng.normal(size=(8, 8)))
        b = ScalarGrid(a.geometry, rng.normal(size=(8, 8)))
        assert jacobian_error(a, b) == pytest.approx(jacobian_error(b, a))

    def test_region_restriction(self):
        a = ScalarGrid.full(geo2d(), 1.0)
        vals = np.ones((8, 8))
        vals[0, 0] = 9.0
        b = ScalarGrid(a.geometry, vals)
        region = np.zeros((8, 8))
        region[4:, 4:] = 1.0
        assert jacobian_error(a, b, ScalarGrid(a.geometry, region)) == 0.0

    def test_empty_region_rejected(self):
        a = ScalarGrid.full(geo2d(), 1.0)
        with pytest.raises(GridError):
            jacobian_error(a, a, ScalarGrid.full(a.geometry, 0.0))


class TestMlv:
    def test_constant_zero(self):
        assert np.all(mlv(ScalarGrid.full(geo2d(), 3.0)).values == 0.0)

    def test_1d_style_step(self):
        vals = np.zeros((8, 8))
        vals[4:, :] = 2.0  # step of height 2 along axis 0
        out = mlv(ScalarGrid(geo2d(), vals)).values
        assert np.allclose(out[3, :], 2.0)
        assert np.allclose(out[4, :], 2.0)
        assert np.allclose(out[1, :], 0.0)

    def test_boundary_truncation(self):
        vals = np.zeros((4, 4))
        vals[0, 0] = 1.0
        out = mlv(ScalarGrid(geo2d(4), vals)).values
        assert out[0, 0] == 1.0  # uses the neighbors it has

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
    def test_shift_and_scale(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=(6, 6))
        base = mlv(ScalarGrid(geo2d(6), vals)).values
        shifted = mlv(ScalarGrid(geo2d(6), vals + shift)).values
        scaled = mlv(ScalarGrid(geo2d(6), scale * vals)).values
        assert np.allclose(shifted, base, atol=1e-12)
        assert np.allclose(scaled, scale * base, rtol=1e-12)

    def test_3d_neighborhood(self):
        geo = GridGeometry((4, 4, 4), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        vals = np.zeros((4, 4, 4))
        vals[2, 2, 2] = 1.0
        out = mlv(ScalarGrid(geo, vals)).values
        # all 26 neighbors of the impulse see the full jump
        assert out[1, 1, 1] == 1.0
        assert out[3, 3, 3] == 1.0
        assert out[0, 0, 0] == 0.0

    def test_mean_mlv_region(self):
        vals = np.zeros((8, 8))
        vals[4, 4] = 1.0
        region = np.zeros((8, 8))
        region[0:2, 0:2] = 1.0
        assert mean_mlv(ScalarGrid(geo2d(), vals), ScalarGrid(geo2d(), region)) == 0.0


class TestLandmarkError:
    def test_identical(self):
        pts = np.array([[1.0, 2.0], [3.0, 4.0]])
        a = LandmarkSet(pts, paired=True)
        b = LandmarkSet(pts.copy(), paired=True)
        assert mean_landmark_error(a, b) == 0.0

    def test_uniform_shift(self):
        pts = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
        a = LandmarkSet(pts, paired=True)
        b = LandmarkSet(pts + np.array([0.0, 3.0]), paired=True)
        assert mean_landmark_error(a, b) == pytest.approx(3.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        pts_a = rng.normal(size=(5, 3))
        pts_b = rng.normal(size=(5, 3))
        base = mean_landmark_error(
            LandmarkSet(pts_a, paired=True), LandmarkSet(pts_b, paired=True)
        )
        t = np.array([1.0, -2.0, 0.5])
        moved = mean_landmark_error(
            LandmarkSet(pts_a + t, paired=True), LandmarkSet(pts_b + t, paired=True)
        )
        assert moved == pytest.approx(base)

    def test_pairing_required(self):
        a = LandmarkSet(np.zeros((2, 2)), paired=False)
        b = LandmarkSet(np.zeros((2, 2)), paired=True)
        with pytest.raises(GridError):
            mean_landmark_error(a, b)
        c = LandmarkSet(np.zeros((3, 2)), paired=True)
        with pytest.raises(GridError):
            mean_landmark_error(b, c)


class TestMaskedSsd:
    def test_identical(self):
        g = ScalarGrid(geo2d(), np.random.default_rng(4).normal(size=(8, 8)))
        assert masked_ssd(g, g) == 0.0

    def test_zero_mask(self):
        a = ScalarGrid.full(geo2d(), 1.0)
        b = ScalarGrid.full(geo2d(), 5.0)
        assert masked_ssd(a, b, ScalarGrid.full(a.geometry, 0.0)) == 0.0

    def test_single_voxel(self):
        geo = GridGeometry((4, 4), (2.0, 2.0), (0.0, 0.0))
        a = ScalarGrid.full(geo, 0.0)
        vals = np.zeros((4, 4))
        vals[1, 1] = 2.0
        b = ScalarGrid(geo, vals)
        assert masked_ssd(a, b) == pytest.approx(4.0 * 4.0)  # residual^2 * volume


class TestMetricReport:
    def test_finite_required(self):
        with pytest.raises(GridError):
            MetricReport("x", float("nan"), "whole", "mm")
        r = MetricReport("x", 1.0, "lung", "mm")
        assert r.units == "mm"
