"""Successive approximations for the stochastic Navier-Stokes representation.

Iterate k carries the velocity u^k, its gradient and the pressure p^k on a
uniform time grid of a periodic cube.  One Picard step runs the backward flow

    d psi = -u^k(theta, psi) d theta + sigma dW,   psi(t) = x,

from every grid node and estimates

    u^{k+1}(t, x)    = E[ u0(psi_0) - int_0^t grad p^{k+1}(tau, psi_tau) dtau ]
    grad u^{k+1}     = E[ grad u0(psi_0) eta_0
                          - int_0^t grad p^{k+1}(tau, psi_tau) (x) W_tau / (sigma (t - tau)) dtau ]

where eta is the Jacobian of the discrete flow and W_tau = int_tau^t eta^T dW
is the Bismut-Elworthy-Li weight.  The pressure solves -lap p^{k+1} = gamma^{k+1}
with gamma^{k+1} = Tr(grad u^k grad u^{k+1}); because grad u^{k+1} itself
depends on p^{k+1}, this linear coupling is resolved by an inner fixed point
started from gamma = Tr(grad u^k grad u^k).

The Constantin-Iyer backend replaces the velocity update by
u^{k+1} = Leray(E[eta_0^T u0(psi_0)]) and needs no pressure.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fields as F
from . import flows
from . import rng
from ._kernels import MODE_CI, MODE_PAPER, MODE_PAPER_NOGRAD, N_CHANNELS, backward_path_estimates
from .errors import ConfigError, InnerDivergenceError, UnsupportedDomainError
from .poisson import PoissonConfig, mc_pressure_multiplier, spectral_poisson

PAPER = "PaperPicard"
CI = "ConstantinIyer"

_LABEL_PICARD = 0x4E53

DIV_TOL = 1e-6


# --------------------------------------------------------------------------
# problem and configuration


@dataclass(frozen=True)
class NSProblem:
    """Initial velocity ``u0`` on a periodic ``domain`` with noise ``sigma`` (nu = sigma^2 / 2)."""

    u0: object
    sigma: float
    t_final: float
    domain: object = field(default_factory=F.PeriodicCube)

    def __post_init__(self):
        if not isinstance(self.domain, F.PeriodicCube):
            raise UnsupportedDomainError("the Picard solver runs on a PeriodicCube")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        div = initial_divergence(self.u0, self.domain)
        if div > DIV_TOL:
            raise ValueError(f"u0 is not divergence free: max |div u0| = {div:.3e}")
        g = F.sample_gradient(self.u0, self.domain, 0.0)
        if not np.all(np.isfinite(g)):
            raise ValueError("u0 has non-finite gradient samples")

    @property
    def nu(self):
        return 0.5 * self.sigma**2


def initial_divergence(u0, domain):
    """max |div u0| over the grid nodes (analytic gradient when available)."""
    g = F.sample_gradient(u0, domain, 0.0)
    return float(np.abs(np.trace(g, axis1=-2, axis2=-1)).max())


@dataclass(frozen=True)
class PicardConfig:
    """Numerical settings of the Picard driver."""

    time_grid_n: int = 8
    grid_n: int = 16
    n_paths: int = 4096
    dt: float = 1e-3
    tol: float = 5e-2
    k_max: int = 10
    inner_tol: float = 1e-3
    inner_max: int = 20
    seed: int = 0
    backend: str = PAPER
    antithetic: bool = True
    pressure_solver: str = "spectral"
    pressure_cfg: PoissonConfig | None = None
    q: float = 1.2
    m: float = 4.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if self.time_grid_n < 2:
            raise ConfigError("time_grid_n must be at least 2")
        if self.grid_n < 4:
            raise ConfigError("grid_n must be at least 4")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be positive")
        if self.antithetic and self.n_paths % 2:
            raise ConfigError("antithetic sampling needs an even n_paths")
        if not self.inner_tol > 0 or self.inner_max < 1:
            raise ConfigError("inner_tol must be positive and inner_max at least 1")
        if self.backend not in (PAPER, CI):
            raise ConfigError(f"backend must be {PAPER!r} or {CI!r}")
        if self.pressure_solver not in ("spectral", "mc"):
            raise ConfigError("pressure_solver must be 'spectral' or 'mc'")
        if not (1.0 < self.q < 1.5 and 3.0 < self.m):
            raise ConfigError("norm exponents need 1 < q < 3/2 and m > 3")

    def time_grid(self, t_final):
        tg = np.linspace(0.0, t_final, self.time_grid_n)
        spacing = t_final / (self.time_grid_n - 1)
        ratio = spacing / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError(
                f"dt={self.dt} must divide the time-grid spacing {spacing} (t_final / (time_grid_n - 1))"
            )
        return tg

    def steps_to(self, t):
        return int(round(t / self.dt))


# --------------------------------------------------------------------------
# state


@dataclass
class PicardState:
    """Iterate k on the common time grid; arrays carry a leading time axis."""

    k: int
    domain: F.PeriodicCube
    time_grid: np.ndarray
    u: np.ndarray
    grad_u: np.ndarray
    p: np.ndarray
    grad_p: np.ndarray
    hess_p: np.ndarray
    gamma: np.ndarray
    u_se: np.ndarray
    grad_u_se: np.ndarray
    deltas: list = field(default_factory=list)
    K1: np.ndarray | None = None
    beta: np.ndarray | None = None
    inner_history: list = field(default_factory=list)
    backend: str = PAPER

    def velocity_field(self, interp="linear"):
        return F.GridVectorField(self.domain, self.time_grid, self.u, grad_values=self.grad_u, interp=interp)

    def pressure_field(self, interp="linear"):
        return F.GridScalarField(self.domain, self.time_grid, self.p, grad_values=self.grad_p, interp=interp)

    def node(self, t):
        j = int(np.argmin(np.abs(self.time_grid - t)))
        if abs(self.time_grid[j] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a time-grid node")
        return j

    def divergence_ratio(self):
        """Per-node ||div u||_2 / ||grad u||_2 (spectral divergence of the grid samples)."""
        out = []
        for j in range(len(self.time_grid)):
            g = F.spectral_gradient(self.u[j], self.domain)
            div = np.trace(g, axis1=-2, axis2=-1)
            den = np.sqrt(np.mean(np.sum(g * g, axis=(-2, -1))))
            out.append(float(np.sqrt(np.mean(div * div)) / den) if den > 0 else 0.0)
        return np.array(out)


def _gamma_grid(ga, gb):
    g = F.gamma(ga, gb)
    # the trace of two divergence-free gradients has zero mean; Monte Carlo
    # estimates do not, so the mean is removed before the periodic solve
    return g - g.mean()


def _norm_trajectories(grad_u, domain, cfg):
    K1, beta = [], []
    for g in grad_u:
        mag = np.sqrt(np.sum(g * g, axis=(-2, -1)))
        K1.append(float(mag.max()))
        beta.append(F.lq_norm(mag, domain, cfg.q, normalized=True) + F.lq_norm(mag, domain, cfg.m, normalized=True))
    return np.array(K1), np.array(beta)


def picard_init(prob: NSProblem, cfg: PicardConfig) -> PicardState:
    """First iterate: u^1 = u0 at every time node, p^1 = 0."""
    dom = _grid_domain(prob, cfg)
    tg = cfg.time_grid(prob.t_final)
    T = len(tg)
    n = dom.grid_n
    u0 = F.sample(prob.u0, dom, 0.0)
    g0 = F.sample_gradient(prob.u0, dom, 0.0)
    u = np.broadcast_to(u0, (T,) + u0.shape).copy()
    gu = np.broadcast_to(g0, (T,) + g0.shape).copy()
    zeros = np.zeros((T, n, n, n))
    st = PicardState(
        k=1,
        domain=dom,
        time_grid=tg,
        u=u,
        grad_u=gu,
        p=zeros.copy(),
        grad_p=np.zeros((T, n, n, n, 3)),
        hess_p=np.zeros((T, n, n, n, 3, 3)),
        gamma=zeros.copy(),
        u_se=np.zeros_like(u),
        grad_u_se=np.zeros_like(gu),
        backend=cfg.backend,
    )
    st.K1, st.beta = _norm_trajectories(gu, dom, cfg)
    return st


def _grid_domain(prob, cfg):
    if prob.domain.grid_n == cfg.grid_n:
        return prob.domain
    return F.PeriodicCube(side=prob.domain.side, grid_n=cfg.grid_n)


# --------------------------------------------------------------------------
# path estimates on the grid


def _initial_modes(prob, dom):
    vals = F.sample(prob.u0, dom, 0.0)
    m, c = F.sparse_modes(vals, dom)
    return m.astype(np.int64), np.ascontiguousarray(c, dtype=np.complex128)


def _time_interp(arr, tg, times):
    """Linear interpolation of node arrays (T, ...) to the given times."""
    out = np.empty((len(times),) + arr.shape[1:])
    for i, t in enumerate(times):
        j0, j1, w = F._time_weights(tg, t)
        out[i] = w * arr[j0] + (1.0 - w) * arr[j1] if j0 != j1 else arr[j0]
    return out


def _build_table(tg, dt, n_max, u, grad_u, grad_p):
    """Fields at every multiple of dt on [0, n_max dt], packed into N_CHANNELS channels."""
    times = np.minimum(dt * np.arange(n_max + 1), tg[-1])
    n = u.shape[1]
    tab = np.empty((n_max + 1, n, n, n, N_CHANNELS))
    tab[..., 0:3] = _time_interp(u, tg, times)
    tab[..., 3:12] = _time_interp(grad_u, tg, times).reshape(n_max + 1, n, n, n, 9)
    if grad_p is None:
        tab[..., 12:15] = 0.0
    else:
        tab[..., 12:15] = _time_interp(grad_p, tg, times)
    return tab


def _normals(cfg, k, j, n_steps, sigma):
    n_base = cfg.n_paths // 2 if cfg.antithetic else cfg.n_paths
    if sigma == 0.0:
        return np.zeros((1, n_steps, 3)), False
    Z = rng.stream(cfg.seed, _LABEL_PICARD, k, j).standard_normal((n_base, n_steps, 3))
    return Z, cfg.antithetic


def _estimate(pts, tab, n_steps, dom, cfg, sigma, Z, anti, modes, mode):
    m, c = modes
    us, uss, gs, gss = backward_path_estimates(
        np.ascontiguousarray(pts, dtype=float), tab, n_steps, 1.0 / dom.h, cfg.dt, sigma, Z, anti, m, c,
        2 * math.pi / dom.side, mode,
    )
    N = Z.shape[0]
    um = us / N
    gm = gs / N
    if N > 1:
        use = np.sqrt(np.maximum(uss / N - um**2, 0.0) / (N - 1))
        gse = np.sqrt(np.maximum(gss / N - gm**2, 0.0) / (N - 1))
    else:
        use = np.zeros_like(um)
        gse = np.zeros_like(gm)
    return um, use, gm, gse


class _Pressure:
    def __init__(self, dom, cfg):
        self.dom = dom
        self.mult = None
        if cfg.pressure_solver == "mc":
            self.mult = mc_pressure_multiplier(dom, cfg.pressure_cfg or PoissonConfig(n_paths=256, dt_bm=1e-2, t_max=20))

    def solve(self, gamma_grid):
        if self.mult is None:
            return spectral_poisson(gamma_grid, self.dom)
        p, grad = self.mult.solve(gamma_grid)
        hess = F.spectral_gradient(grad, self.dom)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        return p, grad, hess


_PRESSURE_CACHE = {}


def _pressure_for(dom, cfg):
    key = (dom, cfg.pressure_solver, cfg.pressure_cfg)
    if key not in _PRESSURE_CACHE:
        _PRESSURE_CACHE[key] = _Pressure(dom, cfg)
    return _PRESSURE_CACHE[key]


def _velocity_pass(state, prob, cfg, dom, tab_base, grad_p, hess_p, noises, modes):
    """One pass over all time nodes; returns u, grad u and their standard errors."""
    tg = state.time_grid
    T = len(tg)
    pts = dom.nodes().reshape(-1, 3)
    n = dom.grid_n
    u0 = F.sample(prob.u0, dom, 0.0)
    g0 = F.sample_gradient(prob.u0, dom, 0.0)
    u = np.empty_like(state.u)
    gu = np.empty_like(state.grad_u)
    u_se = np.zeros_like(state.u)
    gu_se = np.zeros_like(state.grad_u)
    u[0], gu[0] = u0, g0
    tab = tab_base
    if grad_p is not None:
        n_max = tab.shape[0] - 1
        times = np.minimum(cfg.dt * np.arange(n_max + 1), tg[-1])
        tab = tab_base.copy()
        tab[..., 12:15] = _time_interp(grad_p, tg, times)
    euler = prob.sigma == 0.0
    for j in range(1, T):
        ns = cfg.steps_to(tg[j])
        Z, anti = noises[j]
        if cfg.backend == CI:
            mode = MODE_CI
        else:
            mode = MODE_PAPER_NOGRAD if euler else MODE_PAPER
        um, use, gm, gse = _estimate(pts, tab, ns, dom, cfg, prob.sigma, Z, anti, modes, mode)
        uj = um.reshape(n, n, n, 3)
        if cfg.backend == CI:
            uj = F.leray_project_array(uj, dom)
        u[j] = uj
        u_se[j] = use.reshape(n, n, n, 3)
        if mode == MODE_PAPER:
            # the band tau in [t - dt, t] of the weighted integral tends to dt * Hess p(t, x)
            gu[j] = gm.reshape(n, n, n, 3, 3) - cfg.dt * hess_p[j]
            gu_se[j] = gse.reshape(n, n, n, 3, 3)
        else:
            gu[j] = F.spectral_gradient(uj, dom)
    return u, gu, u_se, gu_se


def picard_step(state: PicardState, prob: NSProblem, cfg: PicardConfig) -> PicardState:
    """Advance the iterate from k to k + 1 (paths re-drawn from (seed, k))."""
    dom = state.domain
    tg = state.time_grid
    T = len(tg)
    n_max = cfg.steps_to(tg[-1])
    modes = _initial_modes(prob, dom)
    noises = [None] + [_normals(cfg, state.k, j, cfg.steps_to(tg[j]), prob.sigma) for j in range(1, T)]
    tab = _build_table(tg, cfg.dt, n_max, state.u, state.grad_u, None)
    inner = []
    if cfg.backend == CI:
        u, gu, u_se, gu_se = _velocity_pass(state, prob, cfg, dom, tab, None, None, noises, modes)
        # the representation needs no pressure; it is reported from -lap p = Tr(grad u grad u)
        gam = np.stack([_gamma_grid(gu[j], gu[j]) for j in range(T)])
        sols = [spectral_poisson(gam[j], dom) for j in range(T)]
        p = np.stack([s[0] for s in sols])
        gp = np.stack([s[1] for s in sols])
        hp = np.stack([s[2] for s in sols])
    else:
        solver = _pressure_for(dom, cfg)
        gam = np.stack([_gamma_grid(state.grad_u[j], state.grad_u[j]) for j in range(T)])
        it = 0
        while True:
            it += 1
            sols = [solver.solve(gam[j]) for j in range(T)]
            p = np.stack([s[0] for s in sols])
            gp = np.stack([s[1] for s in sols])
            hp = np.stack([s[2] for s in sols])
            u, gu, u_se, gu_se = _velocity_pass(state, prob, cfg, dom, tab, gp, hp, noises, modes)
            new = np.stack([_gamma_grid(state.grad_u[j], gu[j]) for j in range(T)])
            diff = float(np.abs(new - gam).max())
            inner.append(diff)
            gam = new
            if diff < cfg.inner_tol:
                break
            growing = len(inner) >= 3 and inner[-1] > inner[-2] > inner[-3]
            if it >= cfg.inner_max or growing:
                raise InnerDivergenceError(
                    f"inner velocity/pressure coupling did not contract at k={state.k} "
                    f"(last gamma change {diff:.3e} after {it} iterations)",
                    diagnostics={"k": state.k, "inner_deltas": inner},
                )
    deltas = _deltas(state, u, gu, p, gp, dom, cfg)
    deltas["u_se_max"] = float(u_se.max())
    deltas["grad_u_se_max"] = float(gu_se.max())
    deltas["inner_iterations"] = len(inner)
    new_state = PicardState(
        k=state.k + 1,
        domain=dom,
        time_grid=tg,
        u=u,
        grad_u=gu,
        p=p,
        grad_p=gp,
        hess_p=hp,
        gamma=gam,
        u_se=u_se,
        grad_u_se=gu_se,
        deltas=state.deltas + [deltas],
        inner_history=state.inner_history + [inner],
        backend=cfg.backend,
    )
    new_state.K1, new_state.beta = _norm_trajectories(gu, dom, cfg)
    return new_state


def _deltas(state, u, gu, p, gp, dom, cfg):
    T = len(state.time_grid)
    rho = zeta = mm = ell = 0.0
    for j in range(T):
        rho = max(rho, float(np.abs(u[j] - state.u[j]).max()))
        dg = np.sqrt(np.sum((gu[j] - state.grad_u[j]) ** 2, axis=(-2, -1)))
        zeta = max(zeta, F.lq_norm(dg, dom, cfg.q, normalized=True))
        dp = np.sqrt(np.sum((gp[j] - state.grad_p[j]) ** 2, axis=-1))
        mm = max(mm, F.lq_norm(dp, dom, cfg.m, normalized=True))
        ell = max(ell, float(np.abs(p[j] - state.p[j]).max()))
    return {"k": state.k, "rho": rho, "zeta": zeta, "m": mm, "l": ell, "kappa": rho + zeta + mm}


@dataclass
class PicardHistory:
    """Per-iteration diagnostics of a run."""

    deltas: list
    wall_time: float
    converged_at: int | None

    @property
    def kappa(self):
        return np.array([d["kappa"] for d in self.deltas])

    def ratios(self):
        k = self.kappa
        return k[1:] / np.where(k[:-1] > 0, k[:-1], np.inf)


def picard_run(prob: NSProblem, cfg: PicardConfig, callback=None):
    """Iterate until kappa = rho + zeta + m < tol or k_max steps.

    Returns (state, converged, history); without convergence the state with the
    smallest kappa is returned.
    """
    t0 = time.perf_counter()
    state = picard_init(prob, cfg)
    best, best_kappa = state, math.inf
    converged_at = None
    for _ in range(cfg.k_max):
        state = picard_step(state, prob, cfg)
        d = state.deltas[-1]
        if state.k == 2 and cfg.tol <= 3.0 * d["u_se_max"]:
            raise ConfigError(
                f"tol={cfg.tol} does not exceed 3x the velocity std_err ({d['u_se_max']:.3e}); "
                "increase n_paths or tol"
            )
        if callback is not None:
            callback(state)
        if d["kappa"] < best_kappa:
            best, best_kappa = state, d["kappa"]
        if d["kappa"] < cfg.tol:
            converged_at = state.k
            best = state
            break
    hist = PicardHistory(deltas=best.deltas if converged_at else state.deltas, wall_time=time.perf_counter() - t0,
                         converged_at=converged_at)
    return best, converged_at is not None, hist


# --------------------------------------------------------------------------
# gradient estimator at arbitrary points


def compute_grad_velocity_bel(state: PicardState, prob: NSProblem, cfg: PicardConfig, t, x_batch, seed_label=0):
    """Bismut-Elworthy-Li estimate of grad u^{k+1}(t, x) using drift u^k and the state's pressure.

    Returns (grad, std_err) with shapes (P, 3, 3).  ``t`` must be a multiple of dt.
    """
    if prob.sigma == 0.0:
        raise flows.EulerModeError("the BEL estimator needs sigma > 0; Euler mode uses grid gradients")
    dom = state.domain
    tg = state.time_grid
    ns = cfg.steps_to(t)
    if abs(ns * cfg.dt - t) > 1e-9 * max(1.0, t) or t > tg[-1] + 1e-12:
        raise ValueError("t must be a multiple of dt inside the time grid")
    pts = np.atleast_2d(np.asarray(x_batch, dtype=float))
    tab = _build_table(tg, cfg.dt, ns, state.u, state.grad_u, state.grad_p)
    Z, anti = _normals(cfg, 10_000 + seed_label, 0, ns, prob.sigma)
    _, _, gm, gse = _estimate(pts, tab, ns, dom, cfg, prob.sigma, Z, anti, _initial_modes(prob, dom), MODE_PAPER)
    if ns > 0:
        hp = F.trilinear(_time_interp(state.hess_p, tg, [t])[0], dom.h, pts)
        gm = gm - cfg.dt * hp
    return gm, gse


def bel_gradient_reference(u0, drift, grad_p, hess_p, sigma, t, x_batch, flow_cfg: flows.FlowConfig):
    """Pure-numpy version of the gradient estimator built from the flows module.

    ``drift`` is a VectorField with gradients, ``grad_p`` a VectorField (or
    None for zero pressure) and ``hess_p`` a callable (t, x) -> (..., 3, 3) or
    None.  Works for any analytic fields, including non-periodic ones.
    Returns (mean, std_err) of shape (P, 3, 3).
    """
    cfg = replace(flow_cfg, sigma=sigma, store_increments=True)
    ens = flows.simulate_backward_flow(drift, t, x_batch, cfg)
    jac = flows.simulate_jacobian(drift, ens)
    n = ens.n_steps
    ends = ens.endpoints
    eta0 = jac.eta[:, :, -1]
    samples = np.einsum("npij,npjk->npik", u0.gradient(0.0, ends), eta0)
    if grad_p is not None and n > 1:
        W = np.zeros(ens.positions.shape[:2] + (3,))
        for s in range(n):
            if s > 0:
                gp = grad_p.eval(ens.times[s], ens.positions[:, :, s, :])
                samples -= np.einsum("npi,npk->npik", gp, W) / (sigma * s)
            W += np.einsum("npik,pi->npk", jac.eta[:, :, s], ens.increments[:, s, :])
    mean, se = rng.mean_and_stderr(np.moveaxis(samples, 1, 0), cfg.antithetic)
    if hess_p is not None and n > 0:
        mean = mean - cfg.dt * hess_p(t, np.atleast_2d(x_batch))
    return mean, se


# --------------------------------------------------------------------------
# Constantin-Iyer velocity


def ci_velocity(prob: NSProblem, cfg: PicardConfig, t, x_batch=None, drift_state: PicardState | None = None):
    """Leray(E[eta_0^T u0(psi_0)]) at time ``t`` on the grid, optionally sampled at points.

    The drift is taken from ``drift_state`` (default: the first iterate,
    u = u0 frozen in time).  Returns (values, std_err): grid arrays of shape
    (n, n, n, 3) without ``x_batch``, else arrays of shape (P, 3).
    """
    state = drift_state if drift_state is not None else picard_init(prob, replace(cfg, backend=CI))
    dom = state.domain
    n = dom.grid_n
    ns = cfg.steps_to(t)
    if abs(ns * cfg.dt - t) > 1e-9 * max(1.0, t):
        raise ValueError("t must be a multiple of dt")
    if ns == 0:
        vals = F.leray_project_array(F.sample(prob.u0, dom, 0.0), dom)
        se = np.zeros_like(vals)
    else:
        tab = _build_table(state.time_grid, cfg.dt, ns, state.u, state.grad_u, None)
        Z, anti = _normals(cfg, 20_000, 0, ns, prob.sigma)
        um, use, _, _ = _estimate(dom.nodes().reshape(-1, 3), tab, ns, dom, cfg, prob.sigma, Z, anti,
                                  _initial_modes(prob, dom), MODE_CI)
        vals = F.leray_project_array(um.reshape(n, n, n, 3), dom)
        se = use.reshape(n, n, n, 3)
    if x_batch is None:
        return vals, se
    pts = np.atleast_2d(np.asarray(x_batch, dtype=float))
    return F.trilinear(vals, dom.h, pts), F.trilinear(se, dom.h, pts)


# --------------------------------------------------------------------------
# weak-form residual


@dataclass
class WeakResidualReport:
    """Weak residuals at the final time, one per test field, with error budgets."""

    residuals: np.ndarray
    budgets: np.ndarray
    mc_terms: np.ndarray
    quadrature_terms: np.ndarray
    scheme_terms: np.ndarray
    t: float

    @property
    def max_residual(self):
        return float(np.max(np.abs(self.residuals))) if len(self.residuals) else 0.0

    @property
    def within_budget(self):
        return bool(np.all(np.abs(self.residuals) <= self.budgets))


def _test_data(h, dom):
    hv = F.sample(h, dom, 0.0)
    gh = F.sample_gradient(h, dom, 0.0)
    lap = np.trace(F.spectral_gradient(gh, dom), axis1=-2, axis2=-1)
    return hv, gh, lap


def _weak_integrand(uv, hv, gh, lap, nu, dv):
    # <u, nu lap h> + sum_ij <u_i u_j, d_j h_i>
    return (nu * np.sum(uv * lap) + np.einsum("abci,abcj,abcij->", uv, uv, gh)) * dv


def verify_weak_solution(solution, prob: NSProblem, test_functions, cfg: PicardConfig | None = None, n_gauss=8):
    """Weak residual R(h) = <u(t),h> - <u0,h> - int_0^t (<u, nu lap h> + <u (x) u, grad h>) dtau.

    ``solution`` is a PicardState (time quadrature on its grid: Simpson when
    the node count is odd, trapezoid otherwise) or an analytic VectorField
    (Gauss-Legendre with ``n_gauss`` nodes on the PicardConfig grid or the
    problem's domain).  Test fields must be divergence free so the pressure
    term drops out.
    """
    nu = prob.nu
    t = prob.t_final
    if isinstance(solution, PicardState):
        dom = solution.domain
        tg = solution.time_grid
        U = solution.u
        se = solution.u_se
        w_main = _simpson_weights(tg) if len(tg) % 2 == 1 and len(tg) >= 3 else _trapezoid_weights(tg)
        w_alt = _trapezoid_weights(tg) if len(tg) % 2 == 1 and len(tg) >= 3 else None
        dt_scheme = cfg.dt if cfg is not None else 0.0
    else:
        dom = prob.domain if cfg is None else F.PeriodicCube(side=prob.domain.side, grid_n=cfg.grid_n)
        x, w = np.polynomial.legendre.leggauss(n_gauss)
        tg = 0.5 * t * (x + 1.0)
        U = np.stack([F.sample(solution, dom, tt) for tt in tg])
        se = None
        w_main = 0.5 * t * w
        w_alt = None
        dt_scheme = 0.0
    dv = dom.cell_volume
    u0 = F.sample(prob.u0, dom, 0.0)
    u_end = U[-1] if isinstance(solution, PicardState) else F.sample(solution, dom, t)
    res, mc, quad, scheme = [], [], [], []
    for h in test_functions:
        hv, gh, lap = _test_data(h, dom)
        div = np.abs(np.trace(gh, axis1=-2, axis2=-1)).max()
        if div > 1e-6:
            raise ValueError(f"test field is not divergence free (max |div| = {div:.2e})")
        vals = np.array([_weak_integrand(U[i], hv, gh, lap, nu, dv) for i in range(len(tg))])
        integral = float(np.dot(w_main, vals))
        r = float(np.sum(u_end * hv) * dv - np.sum(u0 * hv) * dv - integral)
        res.append(r)
        if se is not None:
            # errors at different nodes share paths, so they are added in absolute value
            abs_h = np.abs(hv)
            e_end = np.sum(se[-1] * abs_h) * dv
            lin = np.array(
                [
                    (nu * np.sum(se[i] * np.abs(lap)) + 2.0 * np.einsum("abci,abcj,abcij->", np.abs(U[i]), se[i], np.abs(gh)))
                    * dv
                    for i in range(len(tg))
                ]
            )
            mc.append(float(e_end + np.dot(np.abs(w_main), lin)))
            quad.append(float(abs(integral - np.dot(w_alt, vals))) if w_alt is not None else 0.0)
            # weak Euler-Maruyama bias: O(dt) relative to the size of the pairing
            size = float(np.sum(np.abs(u_end * hv)) * dv)
            scheme.append(dt_scheme * t * size)
        else:
            mc.append(0.0)
            quad.append(0.0)
            scheme.append(0.0)
    mc, quad, scheme = np.array(mc), np.array(quad), np.array(scheme)
    budgets = 3.0 * mc + quad + scheme
    return WeakResidualReport(np.array(res), budgets, mc, quad, scheme, t)


def _trapezoid_weights(tg):
    w = np.zeros(len(tg))
    d = np.diff(tg)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def _simpson_weights(tg):
    d = np.diff(tg)
    if not np.allclose(d, d[0]):
        return _trapezoid_weights(tg)
    n = len(tg)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * d[0] / 3.0
