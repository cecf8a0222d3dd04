import math

import numpy as np
import pytest

from stochns import fields as F
from stochns import flows as FL
from stochns import parabolic as PB


def _cfg(n, dt=0.01, seed=0):
    return FL.FlowConfig(sigma=1.0, dt=dt, n_paths=n, seed=seed, antithetic=True)


class TestHeatEquation:
    def test_gaussian_closed_form(self):
        f0 = F.GaussianBump(center=(0.0, 0.0, 0.0), width=0.7, amplitude=1.0)
        prob = PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=f0, t_final=0.3)
        x = np.random.default_rng(0).uniform(-1, 1, (8, 3))
        m, se = PB.solve_parabolic(prob, x, _cfg(4096, seed=1))
        exact = PB.heat_gaussian(1.0, 0.7, (0, 0, 0), 1.0, 0.3, x)
        assert np.all(np.abs(m - exact) <= 3.5 * se)

    def test_heat_gaussian_formula(self):
        # total mass is conserved by the heat flow
        a = np.linspace(-6, 6, 61)
        pts = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        dv = (a[1] - a[0]) ** 3
        m0 = PB.heat_gaussian(1.0, 0.5, (0, 0, 0), 1.0, 0.0, pts).sum() * dv
        m1 = PB.heat_gaussian(1.0, 0.5, (0, 0, 0), 1.0, 0.7, pts).sum() * dv
        assert m1 == pytest.approx(m0, rel=1e-6)

    def test_trig_mode_decays(self):
        f0 = F.FunctionScalar(lambda t, x: np.cos(x[..., 0] + x[..., 1]))
        prob = PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=f0, t_final=0.5)
        x = np.array([[0.0, 0.0, 0.0], [1.0, 0.5, 2.0]])
        m, se = PB.solve_parabolic(prob, x, _cfg(4096, dt=0.05, seed=2))
        exact = math.exp(-0.5) * np.cos(x[:, 0] + x[:, 1])
        assert np.all(np.abs(m - exact) <= 3.5 * se + 1e-12)


class TestTransport:
    def test_pure_transport_by_constant_drift(self):
        c = np.array([0.5, -0.2, 0.1])
        f0 = F.FunctionScalar(lambda t, x: np.sin(x[..., 0]) + x[..., 2])
        prob = PB.ParabolicProblem(g=F.Constant(tuple(c)), sigma=0.0, f0=f0, t_final=1.0)
        x = np.array([[0.3, 0.0, 0.0]])
        m, se = PB.solve_parabolic(prob, x, FL.FlowConfig(sigma=0.0, dt=0.1, n_paths=2))
        assert m[0] == pytest.approx(f0.eval(0.0, x - c)[0], abs=1e-12)
        assert se[0] == 0.0

    def test_source_term(self):
        src = F.FunctionScalar(lambda t, x: np.ones(x.shape[:-1]))
        prob = PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=F.ConstantScalar(2.0), t_final=0.4, gamma_src=src)
        m, _ = PB.solve_parabolic(prob, np.zeros((1, 3)), _cfg(4, dt=0.1))
        assert m[0] == pytest.approx(2.0 - 0.4)

    def test_semigroup_with_exact_midpoint(self):
        # staged through the exact intermediate solution of the heat equation
        f0 = F.GaussianBump(center=(0.0, 0.0, 0.0), width=0.6, amplitude=1.0)
        one = PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=f0, t_final=0.2)
        mid = F.FunctionScalar(lambda t, x: PB.heat_gaussian(1.0, 0.6, (0, 0, 0), 1.0, 0.1, x))
        two = PB.staged_problem(one, 0.1, mid)
        x = np.random.default_rng(3).uniform(-0.5, 0.5, (5, 3))
        m1, s1 = PB.solve_parabolic(one, x, _cfg(4096, seed=4))
        m2, s2 = PB.solve_parabolic(two, x, _cfg(4096, seed=5))
        assert np.all(np.abs(m1 - m2) <= 3.5 * np.hypot(s1, s2))

    def test_vector_initial_data(self):
        prob = PB.ParabolicProblem(g=F.Zero(), sigma=0.0, f0=F.Beltrami(), t_final=0.1)
        x = np.zeros((2, 3))
        m, _ = PB.solve_parabolic(prob, x, FL.FlowConfig(sigma=0.0, dt=0.05, n_paths=2))
        np.testing.assert_allclose(m, F.Beltrami().eval(0.0, x))


class TestPairing:
    def test_duality_for_divergence_free_drift(self):
        dom = F.PeriodicCube(grid_n=8)
        f0 = F.FunctionScalar(lambda t, x: np.cos(x[..., 0]) + np.sin(x[..., 2]))
        h = F.FunctionScalar(lambda t, x: np.cos(x[..., 0]) + 0.5 * np.cos(x[..., 1]))
        prob = PB.ParabolicProblem(g=F.Beltrami(), sigma=1.0, f0=f0, t_final=0.1)
        res = PB.weak_pairing(prob, h, dom, FL.FlowConfig(sigma=1.0, dt=0.01, n_paths=256, seed=3))
        assert abs(res.difference) <= 3 * res.combined_se
        assert res.combined_se > 0

    def test_invalid_problem(self):
        with pytest.raises(ValueError):
            PB.ParabolicProblem(g=F.Zero(), sigma=-1.0, f0=F.ZeroScalar(), t_final=1.0)
        with pytest.raises(ValueError):
            PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=F.ZeroScalar(), t_final=0.5, t0=1.0)
