"""Probabilistic solution of the linear parabolic Cauchy problem

    df/dt = (sigma^2 / 2) Laplace f + g . grad f - gamma(t),   f(t0) = f0,

by averaging f0 over the backward flow of the drift g and subtracting the
source accumulated along each path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import fields as F
from . import flows
from . import rng
from .flows import FlowConfig

# bound on floats held per chunk of start points (about 64 MB)
_CHUNK_FLOATS = 8_000_000


@dataclass(frozen=True)
class ParabolicProblem:
    """Drift ``g``, noise ``sigma``, initial data ``f0`` at ``t0`` and optional source."""

    g: object
    sigma: float
    f0: object
    t_final: float
    gamma_src: object = None
    t0: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.t_final < self.t0:
            raise ValueError("t_final must not precede t0")


def _chunks(n_points, n_paths, n_steps):
    per_point = max(1, n_paths * 3 * 4)
    size = max(1, _CHUNK_FLOATS // per_point)
    for a in range(0, n_points, size):
        yield slice(a, min(n_points, a + size))


def path_samples(prob: ParabolicProblem, points, cfg: FlowConfig, increments=None):
    """Per-path samples f0(psi) - sum dt * gamma(theta_s, psi_s), shape (n_points, n_paths[, 3])."""
    cfg = replace(cfg, sigma=prob.sigma)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = cfg.n_steps(prob.t_final - prob.t0)
    flows._check_time(prob.g, prob.t0, prob.t_final)
    if prob.gamma_src is not None:
        flows._check_time(prob.gamma_src, prob.t0, prob.t_final)
    if increments is None:
        increments = flows.brownian_increments(cfg, n)
    times = flows.backward_times(prob.t_final, prob.t0, cfg.dt)
    noise = cfg.sigma * increments
    out = None
    for sl in _chunks(len(pts), cfg.n_paths, n):
        x0 = np.broadcast_to(pts[sl, None, :], (sl.stop - sl.start, cfg.n_paths, 3))
        acc = [0.0]

        def visit(s, theta, cur):
            acc[0] = acc[0] + cfg.dt * prob.gamma_src.eval(theta, cur)

        end = flows.propagate(prob.g, x0, times, -1.0, noise, cfg.dt, visit if prob.gamma_src is not None else None)
        vals = prob.f0.eval(prob.t0, end) - acc[0]
        if out is None:
            out = np.empty((len(pts),) + vals.shape[1:])
        out[sl] = vals
    return out


def solve_parabolic(prob: ParabolicProblem, eval_points, cfg: FlowConfig, increments=None):
    """Monte Carlo values and standard errors of f(t_final, x) at ``eval_points``."""
    samples = path_samples(prob, eval_points, cfg, increments)
    mean, se = rng.mean_and_stderr(np.moveaxis(samples, 1, 0), cfg.antithetic)
    return mean, se


def heat_gaussian(amplitude, width, center, sigma, t, x):
    """Closed form for g = 0, no source, f0 = amplitude * exp(-|x-c|^2 / (2 w^2))."""
    w2 = width**2 + sigma**2 * t
    r2 = np.sum((np.asarray(x, float) - np.asarray(center, float)) ** 2, axis=-1)
    return amplitude * (width**2 / w2) ** 1.5 * np.exp(-r2 / (2.0 * w2))


def staged_problem(prob: ParabolicProblem, t_mid, f_mid):
    """Second stage of a two-stage solve: start at ``t_mid`` from data ``f_mid``."""
    return replace(prob, f0=f_mid, t0=t_mid)


@dataclass
class PairingResult:
    """Both sides of the duality pairing with their standard errors."""

    direct: float
    direct_se: float
    transported: float
    transported_se: float

    @property
    def difference(self):
        return self.direct - self.transported

    @property
    def combined_se(self):
        return math.hypot(self.direct_se, self.transported_se)


def weak_pairing(prob: ParabolicProblem, h, domain: F.PeriodicCube, cfg: FlowConfig) -> PairingResult:
    """<E f0(psi_{t,0}), h> computed two ways on the grid of ``domain``.

    (a) backward-flow Monte Carlo of f at each node, then quadrature against h;
    (b) forward transport E h(phi_{0,t}(y)), then quadrature against f0.
    For divergence-free drift the two agree.  Each path gives one grid
    quadrature, so the standard errors account for the noise shared by nodes.
    """
    if not isinstance(domain, F.PeriodicCube):
        raise F.UnsupportedDomainError("weak_pairing needs a periodic grid")
    cfg = replace(cfg, sigma=prob.sigma)
    nodes = domain.nodes().reshape(-1, 3)
    dv = domain.cell_volume
    t, t0 = prob.t_final, prob.t0

    samples = path_samples(prob, nodes, cfg)
    hv = h.eval(t, nodes)
    direct = np.tensordot(hv, samples, axes=(0, 0)) * dv if samples.ndim == 2 else None
    if direct is None:
        direct = np.einsum("xc,xpc->p", hv, samples) * dv

    n = cfg.n_steps(t - t0)
    inc = flows.brownian_increments(cfg, n, labels=(1,))
    times = t0 + cfg.dt * np.arange(n + 1)
    noise = cfg.noise_sign * cfg.sigma * inc
    f0v = prob.f0.eval(t0, nodes)
    trans = np.zeros(cfg.n_paths)
    for sl in _chunks(len(nodes), cfg.n_paths, n):
        y0 = np.broadcast_to(nodes[sl, None, :], (sl.stop - sl.start, cfg.n_paths, 3))
        end = flows.propagate(prob.g, y0, times, 1.0, noise, cfg.dt)
        hv_end = h.eval(t, end)
        if hv_end.ndim == 2:
            trans += np.einsum("x,xp->p", f0v[sl], hv_end) * dv
        else:
            trans += np.einsum("xc,xpc->p", f0v[sl], hv_end) * dv
    a, ase = rng.mean_and_stderr(direct, cfg.antithetic)
    b, bse = rng.mean_and_stderr(trans, cfg.antithetic)
    return PairingResult(float(a), float(ase), float(b), float(bse))
