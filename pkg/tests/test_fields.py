import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochns import fields as F
from stochns.errors import FieldDataError, NoSolutionError, OutOfRangeError, UnsupportedDomainError


@pytest.fixture
def cube():
    return F.PeriodicCube(grid_n=16)


def _pts(n=50, seed=0):
    return np.random.default_rng(seed).uniform(0, 2 * math.pi, (n, 3))


class TestAnalyticFields:
    @pytest.mark.parametrize(
        "field",
        [F.Beltrami(1.0, 0.7, -0.3, 0.2), F.TaylorGreen(0.1), F.RigidRotation((0.2, -1.0, 0.5)),
         F.Linear(((0.0, 1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, 0.0)), (1.0, 2.0, 3.0)),
         F.VectorGaussianBump()],
    )
    def test_gradient_matches_finite_differences(self, field):
        x = _pts(20)
        h = 1e-6
        g = field.gradient(0.3, x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (field.eval(0.3, x + e) - field.eval(0.3, x - e)) / (2 * h)
            np.testing.assert_allclose(g[..., :, k], fd, atol=1e-7)

    @pytest.mark.parametrize("field", [F.Beltrami(1.0, 2.0, 0.5, 0.0), F.TaylorGreen(0.0), F.RigidRotation()])
    def test_divergence_free(self, field):
        g = field.gradient(0.0, _pts())
        assert np.abs(np.trace(g, axis1=-2, axis2=-1)).max() < 1e-12

    def test_beltrami_is_its_own_curl(self):
        b = F.Beltrami(1.0, 0.5, 2.0, 0.0)
        x = _pts()
        g = b.gradient(0.0, x)
        curl = np.stack([g[:, 2, 1] - g[:, 1, 2], g[:, 0, 2] - g[:, 2, 0], g[:, 1, 0] - g[:, 0, 1]], axis=-1)
        np.testing.assert_allclose(curl, b.eval(0.0, x), atol=1e-12)

    def test_beltrami_decay(self):
        b = F.Beltrami(1.0, 1.0, 1.0, 0.5)
        x = _pts(5)
        np.testing.assert_allclose(b.eval(2.0, x), math.exp(-1.0) * b.eval(0.0, x))

    def test_beltrami_solves_navier_stokes_symbolically(self):
        sp = pytest.importorskip("sympy")
        X, Y, Z, t, nu = sp.symbols("x y z t nu")
        A, B, C = 1, 1, 1
        d = sp.exp(-nu * t)
        u = sp.Matrix([A * sp.sin(Z) + C * sp.cos(Y), B * sp.sin(X) + A * sp.cos(Z), C * sp.sin(Y) + B * sp.cos(X)]) * d
        p = -(u.dot(u)) / 2
        v = (X, Y, Z)
        for i in range(3):
            adv = sum(u[j] * sp.diff(u[i], v[j]) for j in range(3))
            lap = sum(sp.diff(u[i], w, 2) for w in v)
            res = sp.diff(u[i], t) + adv + sp.diff(p, v[i]) - nu * lap
            assert sp.simplify(res) == 0
        # numerical field agrees with the symbolic one
        f = sp.lambdify((X, Y, Z, t, nu), u, "numpy")
        x = _pts(3)
        ref = np.array([np.ravel(f(*x[i], 0.4, 0.3)) for i in range(3)])
        np.testing.assert_allclose(F.Beltrami(1.0, 1.0, 1.0, 0.3).eval(0.4, x), ref, atol=1e-12)

    def test_gaussian_bump_mass(self):
        g = F.GaussianBump(center=(0.0, 0.0, 0.0), width=0.5, amplitude=2.0)
        a = np.linspace(-4, 4, 81)
        pts = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        assert g.eval(0.0, pts).sum() * 0.1**3 == pytest.approx(g.mass, rel=1e-6)


class TestGridFields:
    def test_trilinear_reproduces_nodes(self, cube):
        v = np.random.default_rng(1).normal(size=(16, 16, 16))
        nodes = cube.nodes()
        np.testing.assert_allclose(F.trilinear(v, cube.h, nodes.reshape(-1, 3)), v.ravel(), atol=1e-12)

    def test_trilinear_is_periodic(self, cube):
        v = np.random.default_rng(2).normal(size=(16, 16, 16, 3))
        x = _pts(10)
        np.testing.assert_allclose(F.trilinear(v, cube.h, x), F.trilinear(v, cube.h, x + 2 * math.pi), atol=1e-10)

    def test_spectral_gradient_exact_on_trig(self, cube):
        b = F.Beltrami(1.0, 0.5, 0.25, 0.0)
        vals = F.sample(b, cube, 0.0)
        np.testing.assert_allclose(F.spectral_gradient(vals, cube), F.sample_gradient(b, cube, 0.0), atol=1e-12)

    def test_fd_gradient_second_order(self):
        b = F.Beltrami(1.0, 1.0, 1.0, 0.0)
        errs = []
        for n in (16, 32):
            d = F.PeriodicCube(grid_n=n)
            errs.append(np.abs(F.fd_gradient(F.sample(b, d, 0.0), d.h) - F.sample_gradient(b, d, 0.0)).max())
        assert 3.5 < errs[0] / errs[1] < 4.5

    def test_time_interpolation_and_range(self, cube):
        b = F.Beltrami(1.0, 1.0, 1.0, 0.0)
        gf = F.grid_field(b, cube, [0.0, 1.0])
        x = _pts(4)
        np.testing.assert_allclose(gf.eval(0.5, x), F.trilinear(F.sample(b, cube, 0.0), cube.h, x))
        with pytest.raises(OutOfRangeError):
            gf.eval(1.5, x)

    def test_spectral_interpolation_exact(self, cube):
        b = F.Beltrami(1.0, 0.3, 0.7, 0.0)
        gf = F.grid_field(b, cube, [0.0], interp="spectral")
        x = _pts(20)
        np.testing.assert_allclose(gf.eval(0.0, x), b.eval(0.0, x), atol=1e-12)

    def test_rejects_bad_samples(self, cube):
        bad = np.zeros((1, 16, 16, 16, 3))
        bad[0, 1, 2, 3, 0] = np.nan
        with pytest.raises(FieldDataError):
            F.GridVectorField(cube, [0.0], bad)
        with pytest.raises(FieldDataError):
            F.GridVectorField(cube, [0.0], np.zeros((1, 8, 8, 8, 3)))
        with pytest.raises(FieldDataError):
            F.GridVectorField(cube, [1.0, 0.0], np.zeros((2, 16, 16, 16, 3)))

    def test_grid_fields_need_periodic_domain(self):
        with pytest.raises(UnsupportedDomainError):
            F.GridScalarField(F.WholeSpace(), [0.0], np.zeros((16, 16, 16)))


class TestOperations:
    def test_leray_projection_removes_gradient_part(self, cube):
        b = F.Beltrami(1.0, 1.0, 1.0, 0.0)
        x = cube.nodes()
        grad_part = np.stack([np.cos(x[..., 0]), np.zeros_like(x[..., 0]), np.zeros_like(x[..., 0])], axis=-1)
        v = F.sample(b, cube, 0.0) + grad_part
        proj = F.leray_project_array(v, cube)
        np.testing.assert_allclose(proj, F.sample(b, cube, 0.0), atol=1e-12)

    def test_divergence_of_beltrami_vanishes(self, cube):
        d = F.divergence(F.Beltrami(1.0, 2.0, 3.0, 0.0), 0.0, domain=cube)
        assert np.abs(d.values).max() < 1e-12

    def test_gamma_is_trace_of_product(self):
        rs = np.random.default_rng(3)
        a, b = rs.normal(size=(5, 3, 3)), rs.normal(size=(5, 3, 3))
        np.testing.assert_allclose(F.gamma(a, b), np.trace(a @ b, axis1=-2, axis2=-1))

    def test_norms_of_beltrami(self, cube):
        n = F.norms(F.Beltrami(1.0, 0.0, 0.0, 0.0), 0.0, q_list=(2.0, math.inf), domain=cube)
        assert n.sup_norm == pytest.approx(1.0)
        # |u|^2 = sin^2 z + cos^2 z = 1 everywhere
        assert n.lq_norm(2.0) == pytest.approx((2 * math.pi) ** 1.5)
        assert n.lipschitz_est <= n.grad_sup_norm + 1e-12

    def test_spectral_ops_reject_whole_space(self):
        with pytest.raises(UnsupportedDomainError):
            F.divergence(F.Beltrami(), 0.0, domain=F.WholeSpace())


class TestSerialization:
    def test_binary_roundtrip_is_bit_exact(self, cube, tmp_path):
        v = np.random.default_rng(4).normal(size=(2, 16, 16, 16, 3))
        gf = F.GridVectorField(cube, [0.0, 0.5], v)
        path = tmp_path / "u.bin"
        F.save_binary(gf, path)
        back = F.load_binary(path)
        assert back.values.tobytes() == gf.values.tobytes()
        assert np.array_equal(back.time_grid, gf.time_grid)

    def test_binary_rejects_garbage(self):
        with pytest.raises(FieldDataError):
            F.from_binary(b"XXXX" + bytes(60))

    def test_csv_roundtrip_scalar(self):
        d = F.PeriodicCube(grid_n=4)
        v = np.random.default_rng(5).normal(size=(1, 4, 4, 4))
        back = F.from_csv(F.to_csv(F.GridScalarField(d, [0.25], v)))
        assert np.array_equal(back.values, v)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=64, max_size=64))
    def test_csv_roundtrip_property(self, data):
        d = F.PeriodicCube(grid_n=4)
        v = np.array(data).reshape(1, 4, 4, 4)
        back = F.from_csv(F.to_csv(F.GridScalarField(d, [0.0], v)))
        assert np.array_equal(back.values, v)


class TestSparseModes:
    def test_modes_reproduce_grid_values(self, cube):
        b = F.Beltrami(1.0, 0.5, 0.0, 0.0)
        vals = F.sample(b, cube, 0.0)
        m, c = F.sparse_modes(vals, cube)
        assert len(m) == 4  # wave vectors +-e_x and +-e_z
        x = _pts(10)
        phase = np.exp(1j * (x @ m.T.astype(float)))
        np.testing.assert_allclose(np.real(phase @ c), b.eval(0.0, x), atol=1e-12)

    def test_nonzero_mean_rejected_by_poisson(self, cube):
        from stochns.poisson import spectral_poisson

        with pytest.raises(NoSolutionError):
            spectral_poisson(np.ones((16, 16, 16)), cube)


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_gamma_trace_cyclicity(self, seed):
        rs = np.random.default_rng(seed)
        a, b = rs.normal(size=(3, 3)), rs.normal(size=(3, 3))
        assert F.gamma(a, b) == pytest.approx(F.gamma(b.T, a.T), abs=1e-12)

    def test_leray_idempotent_and_divergence_free(self, cube):
        v = np.random.default_rng(6).normal(size=(16, 16, 16, 3))
        once = F.leray_project_array(v, cube)
        twice = F.leray_project_array(once, cube)
        assert np.abs(twice - once).max() <= 1e-10 * np.abs(once).max()
        g = F.spectral_gradient(once, cube)
        assert np.abs(np.trace(g, axis1=-2, axis2=-1)).max() <= 1e-10 * np.abs(v).max()

    def test_leray_of_smooth_field_is_divergence_free(self, cube):
        x = cube.nodes()
        v = np.stack([np.sin(x[..., 0]) * np.cos(x[..., 1]), np.cos(x[..., 2]), np.sin(x[..., 0] + x[..., 2])], axis=-1)
        field = F.GridVectorField(cube, [0.0], v)
        proj = F.leray_project(field, 0.0)
        div = F.divergence(proj, 0.0)
        assert np.abs(div.values).max() <= 1e-8 * np.abs(v).max()

    def test_nodes_return_stored_samples_bit_exactly(self, cube):
        v = np.random.default_rng(7).normal(size=(1, 16, 16, 16, 3))
        gf = F.GridVectorField(cube, [0.0], v)
        got = gf.eval(0.0, cube.nodes())
        assert got.tobytes() == v[0].tobytes()
