import math
import numpy as np
import pytest

from stochns import fields as F
from stochns import flows as FL
from stochns import picard as PC
from stochns.errors import ConfigError, EulerModeError, InnerDivergenceError, UnsupportedDomainError

DOM8 = F.PeriodicCube(grid_n=8)


def small_cfg(**kw):
    base = dict(time_grid_n=3, grid_n=8, n_paths=512, dt=0.0125, tol=0.1, k_max=4, seed=3)
    base.update(kw)
    return PC.PicardConfig(**base)


class TestProblemSetup:
    def test_rejects_divergent_initial_data(self):
        with pytest.raises(ValueError, match="divergence"):
            PC.NSProblem(u0=F.Linear(((1.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))), sigma=1.0, t_final=0.1)

    def test_rejects_whole_space(self):
        with pytest.raises(UnsupportedDomainError):
            PC.NSProblem(u0=F.Zero(), sigma=1.0, t_final=0.1, domain=F.WholeSpace())

    def test_viscosity(self):
        assert PC.NSProblem(u0=F.Zero(), sigma=0.4, t_final=1.0).nu == pytest.approx(0.08)

    def test_time_grid_needs_commensurate_dt(self):
        with pytest.raises(ConfigError):
            small_cfg(dt=0.03).time_grid(0.1)
        np.testing.assert_allclose(small_cfg().time_grid(0.1), [0.0, 0.05, 0.1])

    @pytest.mark.parametrize("kw", [dict(q=1.6), dict(m=3.0), dict(n_paths=3), dict(backend="x"), dict(tol=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            small_cfg(**kw)


class TestFixedPoints:
    def test_zero_velocity(self):
        prob = PC.NSProblem(u0=F.Zero(), sigma=1.0, t_final=0.1, domain=DOM8)
        state, converged, hist = PC.picard_run(prob, small_cfg())
        assert converged and hist.converged_at == 2
        assert np.abs(state.u).max() == 0.0
        assert np.abs(state.p).max() == 0.0

    def test_constant_velocity(self):
        c = (0.5, -1.0, 0.25)
        prob = PC.NSProblem(u0=F.Constant(c), sigma=1.0, t_final=0.1, domain=DOM8)
        state, converged, _ = PC.picard_run(prob, small_cfg())
        assert converged
        np.testing.assert_allclose(state.u, np.broadcast_to(c, state.u.shape), atol=1e-12)
        assert np.abs(state.grad_u).max() < 1e-12

    def test_init_state(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        st = PC.picard_init(prob, small_cfg())
        assert st.k == 1
        np.testing.assert_allclose(st.u[2], F.sample(F.Beltrami(), DOM8, 0.0))
        assert st.K1.shape == (3,)


@pytest.fixture(scope="module")
def first_step():
    prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
    cfg = small_cfg(n_paths=1024)
    st0 = PC.picard_init(prob, cfg)
    return prob, cfg, st0, PC.picard_step(st0, prob, cfg)


class TestBeltrami:
    def test_first_step_improves_on_frozen_data(self, first_step):
        prob, cfg, st0, st1 = first_step
        exact = F.sample(F.Beltrami(1, 1, 1, prob.nu), DOM8, 0.1)
        e0 = np.abs(st0.u[-1] - exact).max()
        e1 = np.abs(st1.u[-1] - exact).max()
        assert e1 < 0.5 * e0
        assert e1 <= 3 * st1.u_se[-1].max() + 0.02

    def test_step_is_deterministic(self, first_step):
        prob, cfg, st0, st1 = first_step
        again = PC.picard_step(st0, prob, cfg)
        assert again.u.tobytes() == st1.u.tobytes()

    def test_pressure_matches_exact_form(self, first_step):
        # p = -|u|^2 / 2 up to its mean
        prob, cfg, st0, st1 = first_step
        u = F.sample(F.Beltrami(), DOM8, 0.0)
        p_exact = -0.5 * np.sum(u * u, axis=-1)
        p_exact -= p_exact.mean()
        np.testing.assert_allclose(st1.p[0], p_exact, atol=1e-10)

    def test_divergence_ratio_small(self, first_step):
        assert first_step[3].divergence_ratio().max() < 0.05

    def test_inner_divergence_reported(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        cfg = small_cfg(n_paths=64, inner_max=1, inner_tol=1e-14)
        with pytest.raises(InnerDivergenceError) as info:
            PC.picard_step(PC.picard_init(prob, cfg), prob, cfg)
        assert info.value.diagnostics["k"] == 1

    def test_tolerance_below_noise_rejected(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        with pytest.raises(ConfigError, match="std_err"):
            PC.picard_run(prob, small_cfg(n_paths=16, tol=0.01))


class TestEulerMode:
    def test_steady_beltrami_is_preserved(self):
        # with sigma = 0 the Beltrami field is a steady Euler flow
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=0.0, t_final=0.1, domain=DOM8)
        state, converged, _ = PC.picard_run(prob, small_cfg(n_paths=2, antithetic=False, tol=0.2))
        assert converged
        assert np.abs(state.u[-1] - F.sample(F.Beltrami(), DOM8, 0.0)).max() < 0.05
        assert np.all(state.u_se == 0.0)

    def test_bel_unavailable(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=0.0, t_final=0.1, domain=DOM8)
        cfg = small_cfg()
        with pytest.raises(EulerModeError):
            PC.compute_grad_velocity_bel(PC.picard_init(prob, cfg), prob, cfg, 0.05, np.zeros((1, 3)))


class TestGradientEstimator:
    def test_compiled_matches_reference(self):
        dom = F.PeriodicCube(grid_n=8)
        prob = PC.NSProblem(u0=F.Beltrami(1.0, 0.5, 0.8, 0.0), sigma=1.0, t_final=0.1, domain=dom)
        cfg = small_cfg(n_paths=4096)
        st = PC.picard_init(prob, cfg)
        # give the state a pressure so the weighted integral is exercised
        gam = PC._gamma_grid(st.grad_u[0], st.grad_u[0])
        from stochns.poisson import spectral_poisson

        p, gp, hp = spectral_poisson(gam, dom)
        st.grad_p[:] = gp
        st.hess_p[:] = hp
        x = np.random.default_rng(0).uniform(0, 2 * math.pi, (4, 3))
        g_fast, se_fast = PC.compute_grad_velocity_bel(st, prob, cfg, 0.05, x)
        tg = st.time_grid
        drift = st.velocity_field()
        gpf = F.GridVectorField(dom, tg, st.grad_p)
        j = st.node(0.05)
        g_ref, se_ref = PC.bel_gradient_reference(
            prob.u0, drift, gpf, lambda t, y: F.trilinear(st.hess_p[j], dom.h, y), 1.0, 0.05, x,
            FL.FlowConfig(sigma=1.0, dt=cfg.dt, n_paths=4096, seed=11, antithetic=True),
        )
        comb = np.sqrt(se_fast**2 + se_ref**2)
        assert np.all(np.abs(g_fast - g_ref) <= 4 * comb + 1e-12)

    def test_reference_recovers_heat_gradient(self):
        # zero drift and pressure: E[grad u0(x + sigma B)] = e^{-nu t} grad u0(x) for a Beltrami mode
        u0 = F.Beltrami(1.0, 0.0, 0.0, 0.0)
        x = np.array([[0.3, 0.2, 1.0]])
        m, se = PC.bel_gradient_reference(u0, F.Zero(), None, None, 1.0, 0.2, x,
                                          FL.FlowConfig(sigma=1.0, dt=0.02, n_paths=8192, seed=2, antithetic=True))
        exact = math.exp(-0.1) * u0.gradient(0.0, x)
        assert np.all(np.abs(m - exact) <= 4 * se + 1e-12)


class TestConstantinIyer:
    def test_time_zero_is_projection(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        vals, se = PC.ci_velocity(prob, small_cfg(), 0.0)
        np.testing.assert_allclose(vals, F.sample(F.Beltrami(), DOM8, 0.0), atol=1e-12)
        assert np.all(se == 0)

    def test_one_step_close_to_exact(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        cfg = small_cfg(n_paths=1024, backend=PC.CI)
        x = np.random.default_rng(1).uniform(0, 2 * math.pi, (5, 3))
        vals, se = PC.ci_velocity(prob, cfg, 0.05, x)
        exact = F.trilinear(F.sample(F.Beltrami(1, 1, 1, prob.nu), DOM8, 0.05), DOM8.h, x)
        assert np.all(np.abs(vals - exact) <= 3 * se + 0.02)


class TestWeakResidual:
    def test_exact_solution_has_tiny_residual(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=F.PeriodicCube(grid_n=16))
        tests = [F.Beltrami(1.0, 0.0, 0.0, 0.0), F.TaylorGreen(0.0), F.Beltrami(0.0, 1.0, -1.0, 0.0)]
        rep = PC.verify_weak_solution(F.Beltrami(1, 1, 1, prob.nu), prob, tests)
        assert rep.max_residual <= 1e-8

    def test_wrong_solution_is_detected(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=F.PeriodicCube(grid_n=16))
        rep = PC.verify_weak_solution(F.Beltrami(1, 1, 1, 0.0), prob, [F.Beltrami(1.0, 0.0, 0.0, 0.0)])
        assert rep.max_residual > 1e-2

    def test_rejects_divergent_test_field(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        with pytest.raises(ValueError, match="divergence"):
            PC.verify_weak_solution(F.Beltrami(), prob, [F.VectorGaussianBump()])

    def test_budget_components_for_picard_state(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=1.0, t_final=0.1, domain=DOM8)
        cfg = small_cfg(n_paths=256)
        st = PC.picard_step(PC.picard_init(prob, cfg), prob, cfg)
        rep = PC.verify_weak_solution(st, prob, [F.Beltrami(1.0, 0.0, 0.0, 0.0)], cfg)
        assert rep.mc_terms[0] > 0 and rep.quadrature_terms[0] >= 0 and rep.scheme_terms[0] > 0
        np.testing.assert_allclose(rep.budgets, 3 * rep.mc_terms + rep.quadrature_terms + rep.scheme_terms)


class TestSpecProperties:
    def test_euler_mode_pressure(self):
        prob = PC.NSProblem(u0=F.Beltrami(), sigma=0.0, t_final=0.1, domain=DOM8)
        state, _, _ = PC.picard_run(prob, small_cfg(n_paths=2, antithetic=False, tol=0.2))
        u = F.sample(F.Beltrami(), DOM8, 0.0)
        p = -0.5 * np.sum(u * u, axis=-1)
        p -= p.mean()
        assert np.abs(state.p[-1] - p).max() < 0.05

    def test_norms_below_apriori_bound(self, first_step):
        from stochns import apriori as AP

        prob, cfg, st0, st1 = first_step
        g0 = F.sample_gradient(prob.u0, DOM8, 0.0)
        mag = np.sqrt(np.sum(g0 * g0, axis=(-2, -1)))
        params = AP.AprioriParams(
            float(mag.max()),
            F.lq_norm(mag, DOM8, cfg.q, normalized=True) + F.lq_norm(mag, DOM8, cfg.m, normalized=True),
        )
        sol = AP.solve_bound_odes(params, prob.t_final, 1e-3)
        assert sol.bounded
        # alpha grows with elapsed time, so the bound at time t_j is read at s = t_final - t_j
        for t, K in zip(st1.time_grid, st1.K1):
            alpha = np.interp(prob.t_final - t, sol.s_grid, sol.alpha)
            assert K <= alpha * (1 + 1e-9) + 3 * st1.grad_u_se.max()
