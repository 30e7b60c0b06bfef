import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdr.grid import (
    GridError,
    GridGeometry,
    ScalarGrid,
    VectorGrid,
    adjoint_gradient_axis,
    compose,
    divergence_of_product,
    downsample,
    gradient,
    gradient_values,
    identity_positions,
    jacobian_determinant,
    jacobian_matrix,
    sample_scalar,
    sample_values,
    sample_vector,
    splat_values,
    upsample_field,
)


def geo1d(n=8, h=1.0, o=0.0):
    return GridGeometry((n,), (h,), (o,))


def geo2d(nx=8, ny=7, hx=1.0, hy=1.0):
    return GridGeometry((nx, ny), (hx, hy), (0.0, 0.0))


class TestGeometry:
    def test_invariants(self):
        with pytest.raises(GridError):
            GridGeometry((1,), (1.0,), (0.0,))
        with pytest.raises(GridError):
            GridGeometry((4, 4), (1.0, 0.0), (0.0, 0.0))
        with pytest.raises(GridError):
            GridGeometry((4, 4), (1.0,), (0.0, 0.0))
        with pytest.raises(GridError):
            GridGeometry((4, 4, 4, 4), (1.0,) * 4, (0.0,) * 4)

    def test_extent_is_cell_based(self):
        geo = GridGeometry((16, 8), (1.0, 2.0), (0.0, 0.0))
        assert geo.extent == (16.0, 16.0)
        assert geo.voxel_volume == 2.0

    def test_field_shape_validation(self):
        geo = geo2d(4, 4)
        with pytest.raises(GridError):
            ScalarGrid(geo, np.zeros((4, 5)))
        with pytest.raises(GridError):
            VectorGrid(geo, np.zeros((4, 4)))


class TestInterpolation:
    def test_constant(self):
        g = ScalarGrid.full(geo2d(), 3.25)
        pts = np.array([[0.3, 0.7], [-5.0, 100.0], [3.999, 2.001]])
        assert np.allclose(sample_scalar(g, pts), 3.25)

    def test_node_exact(self):
        rng = np.random.default_rng(0)
        geo = GridGeometry((5, 6), (0.7, 1.3), (-1.0, 2.0))
        g = ScalarGrid(geo, rng.normal(size=geo.dims))
        pos = identity_positions(geo)
        assert np.array_equal(sample_scalar(g, pos), g.values)

    def test_1d_linear(self):
        # grid values [0, 1] at x = 0, 1 mm; p = 0.25 -> 0.25
        g = ScalarGrid(geo1d(2), np.array([0.0, 1.0]))
        assert sample_scalar(g, np.array([[0.25]]))[0] == pytest.approx(0.25)

    def test_clamping(self):
        g = ScalarGrid(geo1d(3), np.array([5.0, 1.0, 9.0]))
        assert sample_scalar(g, np.array([[-10.0]]))[0] == 5.0
        assert sample_scalar(g, np.array([[10.0]]))[0] == 9.0

    def test_vector_componentwise(self):
        # 1D field [0, 2] at x = 0, 1; p = 0.5 -> 1
        v = VectorGrid(geo1d(2), np.array([[0.0], [2.0]]))
        assert sample_vector(v, np.array([[0.5]]))[0, 0] == pytest.approx(1.0)

    def test_splat_is_exact_transpose(self):
        rng = np.random.default_rng(3)
        geo = GridGeometry((6, 5), (1.0, 1.3), (0.0, -1.0))
        pts = rng.uniform(-2, 9, size=(40, 2))
        x = rng.normal(size=geo.dims)
        y = rng.normal(size=40)
        lhs = np.vdot(sample_values(x, geo, pts), y)
        rhs = np.vdot(x, splat_values(y, geo, pts))
        assert lhs == pytest.approx(rhs, rel=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 1000))
    def test_node_exact_property(self, nx, ny, seed):
        rng = np.random.default_rng(seed)
        geo = geo2d(nx, ny)
        g = ScalarGrid(geo, rng.normal(size=geo.dims))
        pos = identity_positions(geo)
        assert np.array_equal(sample_scalar(g, pos), g.values)


class TestGradient:
    def test_constant_zero(self):
        g = ScalarGrid.full(geo2d(), 7.0)
        assert np.allclose(gradient(g).values, 0.0)

    def test_linear_exact_everywhere_interior(self):
        geo = GridGeometry((8, 6), (0.5, 2.0), (0.0, 0.0))
        pos = identity_positions(geo)
        g = ScalarGrid(geo, 3.0 * pos[..., 0] - 1.5 * pos[..., 1])
        grad = gradient(g).values
        assert np.allclose(grad[..., 0], 3.0, atol=1e-12)
        assert np.allclose(grad[..., 1], -1.5, atol=1e-12)

    def test_quadratic_exact_interior(self):
        geo = geo1d(9, h=0.5)
        x = identity_positions(geo)[..., 0]
        g = ScalarGrid(geo, x**2)
        grad = gradient(g).values[..., 0]
        assert np.allclose(grad[1:-1], 2.0 * x[1:-1], atol=1e-12)

    def test_adjoint_gradient_is_negative_transpose(self):
        for n, h in ((2, 1.0), (3, 0.7), (4, 1.0), (9, 0.31)):
            fwd = np.zeros((n, n))
            adj = np.zeros((n, n))
            for i in range(n):
                e = np.zeros(n)
                e[i] = 1.0
                fwd[:, i] = gradient_values(e, (h,))[0]
                adj[:, i] = adjoint_gradient_axis(e, h, 0)
            assert np.allclose(adj, -fwd.T, atol=1e-13)


class TestDivergence:
    def test_constant_product_zero(self):
        geo = geo2d()
        i = ScalarGrid.full(geo, 1.0)
        v = VectorGrid(geo, np.full(geo.dims + (2,), 2.5))
        div = divergence_of_product(i, v).values
        assert np.allclose(div[1:-1, 1:-1], 0.0, atol=1e-12)

    def test_identity_field_gives_dimension(self):
        geo = geo2d()
        i = ScalarGrid.full(geo, 1.0)
        v = VectorGrid(geo, identity_positions(geo).copy())
        div = divergence_of_product(i, v).values
        assert np.allclose(div[1:-1, 1:-1], 2.0, atol=1e-12)

    def test_linear_density_constant_velocity(self):
        geo = geo1d(8)
        x = identity_positions(geo)[..., 0]
        i = ScalarGrid(geo, x)
        v = VectorGrid(geo, np.full((8, 1), 3.0))
        div = divergence_of_product(i, v).values
        assert np.allclose(div[1:-1], 3.0, atol=1e-12)

    def test_matches_jacobian_trace(self):
        rng = np.random.default_rng(5)
        geo = geo2d(9, 8)
        v = VectorGrid(geo, rng.normal(size=geo.dims + (2,)))
        ones = ScalarGrid.full(geo, 1.0)
        div = divergence_of_product(ones, v).values
        trace = np.trace(jacobian_matrix(v), axis1=-2, axis2=-1) - geo.ndim
        assert np.allclose(div, trace, atol=1e-10)

    def test_geometry_mismatch(self):
        with pytest.raises(GridError):
            divergence_of_product(
                ScalarGrid.full(geo2d(8, 7), 1.0), VectorGrid.zeros(geo2d(8, 8))
            )


class TestJacobian:
    def test_zero_displacement_identity(self):
        jac = jacobian_matrix(VectorGrid.zeros(geo2d()))
        assert np.allclose(jac, np.eye(2))

    def test_doubling_map(self):
        geo = geo2d()
        u = VectorGrid(geo, identity_positions(geo).copy())  # phi(x) = 2x
        jac = jacobian_matrix(u)
        assert np.allclose(jac[1:-1, 1:-1], 2.0 * np.eye(2), atol=1e-12)

    def test_2d_shear(self):
        geo = geo2d(8, 8)
        pos = identity_positions(geo)
        alpha = 0.3
        u = np.zeros(geo.dims + (2,))
        u[..., 0] = alpha * pos[..., 1]
        jac = jacobian_matrix(VectorGrid(geo, u))
        expected = np.array([[1.0, alpha], [0.0, 1.0]])
        assert np.allclose(jac[1:-1, 1:-1], expected, atol=1e-12)

    def test_determinants(self):
        geo = geo2d(8, 8)
        pos = identity_positions(geo)
        assert np.allclose(jacobian_determinant(VectorGrid.zeros(geo)).values, 1.0)
        # phi(x, y) = (2x, 3y)
        u = np.stack([pos[..., 0], 2.0 * pos[..., 1]], axis=-1)
        det = jacobian_determinant(VectorGrid(geo, u)).values
        assert np.allclose(det[1:-1, 1:-1], 6.0, atol=1e-12)
        # translations are volume preserving
        t = VectorGrid(geo, np.full(geo.dims + (2,), 1.7))
        assert np.allclose(jacobian_determinant(t).values, 1.0, atol=1e-12)


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(1)
        geo = geo2d()
        f = VectorGrid(geo, 0.3 * rng.normal(size=geo.dims + (2,)))
        ident = VectorGrid.zeros(geo)
        assert np.allclose(compose(f, ident).values, f.values, atol=1e-12)
        assert np.allclose(compose(ident, f).values, f.values, atol=1e-12)

    def test_translations_add(self):
        geo = geo2d()
        a = VectorGrid(geo, np.full(geo.dims + (2,), 0.4))
        b = VectorGrid(geo, np.full(geo.dims + (2,), -0.9))
        assert np.allclose(compose(a, b).values, -0.5, atol=1e-12)

    def test_1d_affine(self):
        # phi(x) = 2x composed with psi(x) = x + 1 -> 2x + 2
        geo = geo1d(10)
        x = identity_positions(geo)[..., 0]
        phi = VectorGrid(geo, x[..., None].copy())
        psi = VectorGrid(geo, np.ones((10, 1)))
        out = compose(phi, psi).values[..., 0]
        interior = slice(0, 7)  # result positions must stay in domain
        assert np.allclose(out[interior], (x + 2)[interior], atol=1e-12)

    def test_associative_on_affine(self):
        geo = GridGeometry((12, 12), (1.0, 1.0), (0.0, 0.0))
        pos = identity_positions(geo)

        def affine(mat, shift):
            target = np.einsum("rc,...c->...r", np.asarray(mat), pos) + shift
            return VectorGrid(geo, target - pos)

        a = affine([[1.02, 0.01], [0.0, 0.99]], [0.2, -0.1])
        b = affine([[0.98, 0.0], [0.02, 1.01]], [-0.15, 0.1])
        c = affine([[1.0, -0.02], [0.01, 1.0]], [0.1, 0.2])
        lhs = compose(a, compose(b, c)).values
        rhs = compose(compose(a, b), c).values
        margin = 3
        dev = np.max(np.abs(lhs - rhs)[margin:-margin, margin:-margin])
        assert dev < 1e-6 * max(geo.extent)


class TestResampling:
    def test_downsample_factor_one_identity(self):
        g = ScalarGrid(geo2d(), np.random.default_rng(0).normal(size=(8, 7)))
        assert downsample(g, 1) is g

    def test_downsample_constant(self):
        g = ScalarGrid.full(geo2d(8, 8), 4.5)
        out = downsample(g, 2)
        assert out.geometry.dims == (4, 4)
        assert out.geometry.spacing == (2.0, 2.0)
        assert np.allclose(out.values, 4.5, atol=1e-12)

    def test_downsample_ramp(self):
        geo = geo1d(8)
        x = identity_positions(geo)[..., 0]
        ramp = 2.0 * x
        out = downsample(ScalarGrid(geo, ramp), 2)
        assert out.geometry.dims == (4,)
        assert out.geometry.spacing == (2.0,)
        # oracle: dense symmetric-boundary convolution, then stride-2 pick
        from gdr.kernel import _gaussian_weights

        w = _gaussian_weights(1.0)  # sigma = 0.5 * factor voxels
        r = len(w) // 2
        padded = np.pad(ramp, r, mode="symmetric")
        smoothed = np.array(
            [w @ padded[i : i + 2 * r + 1] for i in range(len(ramp))]
        )
        assert np.allclose(out.values, smoothed[::2], atol=1e-12)
        # nodes >= radius from the boundary keep the exact ramp
        clean = [i for i, xi in enumerate(x[::2]) if r <= 2 * i <= len(ramp) - 1 - r]
        assert np.allclose(out.values[clean], ramp[::2][clean], atol=1e-10)

    def test_downsample_too_far(self):
        with pytest.raises(GridError):
            downsample(ScalarGrid.full(geo2d(4, 4), 1.0), 4)

    def test_upsample_same_geometry(self):
        geo = geo2d()
        v = VectorGrid(geo, np.random.default_rng(1).normal(size=geo.dims + (2,)))
        out = upsample_field(v, geo)
        assert np.array_equal(out.values, v.values)

    def test_upsample_constant(self):
        coarse = GridGeometry((4, 4), (2.0, 2.0), (0.0, 0.0))
        fine = GridGeometry((8, 8), (1.0, 1.0), (0.0, 0.0))
        v = VectorGrid(coarse, np.full((4, 4, 2), 1.25))
        assert np.allclose(upsample_field(v, fine).values, 1.25)

    def test_upsample_linear_exact(self):
        coarse = GridGeometry((4,), (2.0,), (0.0,))
        fine = GridGeometry((8,), (1.0,), (0.0,))
        xc = identity_positions(coarse)[..., 0]
        v = VectorGrid(coarse, (0.5 * xc)[..., None])
        out = upsample_field(v, fine).values[..., 0]
        xf = identity_positions(fine)[..., 0]
        inside = xf <= xc.max()  # beyond the last coarse node values clamp
        assert np.allclose(out[inside], 0.5 * xf[inside], atol=1e-12)

    def test_upsample_extent_mismatch(self):
        coarse = GridGeometry((4,), (2.0,), (0.0,))
        other = GridGeometry((12,), (1.0,), (0.0,))
        with pytest.raises(GridError):
            upsample_field(VectorGrid.zeros(coarse), other)

    def test_downsample_then_upsample_round_trip_geometry(self):
        geo = geo2d(16, 16)
        v = VectorGrid(geo, np.random.default_rng(2).normal(size=geo.dims + (2,)))
        coarse = downsample(v, 4)
        back = upsample_field(coarse, geo)
        assert back.geometry == geo
