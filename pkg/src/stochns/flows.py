"""Backward and forward stochastic flows, their Jacobians and time reversal.

The backward flow anchored at time t solves

    d psi = -u(theta, psi) d theta + sigma dW(theta),   psi(t) = x,

integrated from theta = t down to theta = 0.  The forward flow solves
d phi = u(tau, phi) d tau + s * sigma dW(tau) with a selectable noise sign s.
Both use explicit Euler-Maruyama.  Brownian increments are shared by all start
points of a batch (common random numbers), so ensembles started from
different points, or driven by different drifts, can be compared path by path.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import EscapedPathsError, EulerModeError, MissingDataError, OutOfRangeError

BACKWARD = "BackwardPsi"
FORWARD = "ForwardPhi"

_LABEL_FLOW = 0x464C
ESCAPE_ABORT_FRACTION = 0.01


@dataclass(frozen=True)
class FlowConfig:
    """Settings for one flow ensemble.

    ``sigma`` is the noise amplitude (nu = sigma^2 / 2); ``sigma = 0`` gives the
    deterministic Euler mode.  ``noise_sign`` multiplies the noise of forward
    flows only.  ``box_radius`` activates the whole-space escape check.
    """

    sigma: float
    dt: float
    n_paths: int = 1
    seed: int = 0
    store_increments: bool = True
    antithetic: bool = False
    box_radius: float | None = None
    noise_sign: float = -1.0

    def __post_init__(self):
        if not self.sigma >= 0.0:
            raise ValueError("sigma must be non-negative")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even path count")
        if self.noise_sign not in (-1.0, 1.0):
            raise ValueError("noise_sign must be +1 or -1")

    def n_steps(self, duration):
        return n_steps_for(duration, self.dt)


def n_steps_for(duration, dt):
    n = int(round(duration / dt))
    if n < 0:
        raise ValueError("negative flow duration")
    return n


@dataclass
class FlowEnsemble:
    """Simulated paths for a batch of start points.

    ``positions`` has shape (n_points, n_paths, n_steps + 1, 3); index 0 is the
    anchor (time ``t_start``) and index ``s`` is at ``times[s]``.
    ``increments`` has shape (n_paths, n_steps, 3) and holds the unscaled
    Brownian increments (variance dt) that drove step ``s``.
    """

    t_start: float
    t_end: float
    dt: float
    sigma: float
    direction: str
    positions: np.ndarray
    times: np.ndarray
    increments: np.ndarray | None = None
    escaped: np.ndarray | None = None
    noise_sign: float = -1.0
    antithetic: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def n_paths(self):
        return self.positions.shape[1]

    @property
    def n_steps(self):
        return self.positions.shape[2] - 1

    @property
    def endpoints(self):
        return self.positions[:, :, -1, :]

    @property
    def escaped_count(self):
        return 0 if self.escaped is None else int(self.escaped.sum())

    def to_csv(self, point=None):
        """Path dump with columns path_id, step, theta, x, y, z.

        For several start points the path id is ``point * n_paths + path``.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path_id", "step", "theta", "x", "y", "z"])
        pts = range(self.n_points) if point is None else [point]
        for i in pts:
            for p in range(self.n_paths):
                pid = i * self.n_paths + p
                for s in range(self.n_steps + 1):
                    x = self.positions[i, p, s]
                    w.writerow([pid, s, repr(float(self.times[s]))] + [repr(float(v)) for v in x])
        return buf.getvalue()


@dataclass
class JacobianPath:
    """Jacobian process along an ensemble, eta[i, p, s] of shape (3, 3).

    eta at step 0 (the anchor time) is the identity.
    """

    eta: np.ndarray
    times: np.ndarray

    def det(self):
        return np.linalg.det(self.eta)


def brownian_increments(cfg: FlowConfig, n_steps, labels=()):
    """Unscaled increments (n_paths, n_steps, 3) for the configured seed."""
    return rng.gaussian_increments(
        cfg.seed, (_LABEL_FLOW,) + tuple(labels), cfg.n_paths, n_steps, cfg.dt, antithetic=cfg.antithetic
    )


def _check_time(u, lo, hi):
    a, b = u.t_range()
    eps = 1e-12 * max(1.0, abs(hi))
    if lo < a - eps or hi > b + eps:
        raise OutOfRangeError(f"flow needs the drift on [{lo}, {hi}] but it is defined on [{a}, {b}]")


def _prepare_increments(cfg, n, increments):
    if increments is None:
        return brownian_increments(cfg, n)
    inc = np.asarray(increments, dtype=float)
    if inc.shape != (cfg.n_paths, n, 3):
        raise ValueError(f"increments must have shape {(cfg.n_paths, n, 3)}, got {inc.shape}")
    return inc


def _integrate(u, x0, times, drift_sign, noise, dt, box_radius):
    """Shared Euler-Maruyama loop; ``noise`` already includes sigma and sign."""
    n_pts = x0.shape[0]
    n_paths, n, _ = noise.shape
    pos = np.empty((n_pts, n_paths, n + 1, 3))
    pos[:, :, 0, :] = x0[:, None, :]
    escaped = np.zeros((n_pts, n_paths), dtype=bool) if box_radius is not None else None
    for s in range(n):
        cur = pos[:, :, s, :]
        nxt = cur + drift_sign * dt * u.eval(times[s], cur) + noise[None, :, s, :]
        if escaped is not None:
            # escaped paths are frozen at their last in-box position
            nxt = np.where(escaped[..., None], cur, nxt)
            escaped |= np.linalg.norm(nxt, axis=-1) > box_radius
        pos[:, :, s + 1, :] = nxt
    if not np.all(np.isfinite(pos)):
        raise FloatingPointError("non-finite flow positions")
    return pos, escaped


def propagate(u, x0, times, drift_sign, noise, dt, visit=None):
    """Euler-Maruyama without storing the path; returns the endpoints.

    ``x0`` has shape (..., n_paths, 3) and ``noise`` (n_paths, n, 3) already
    includes sigma and sign.  ``visit(s, time, positions)`` is called before
    each step, which gives left-point quadratures along the path.
    """
    cur = np.array(x0, dtype=float)
    for s in range(noise.shape[1]):
        if visit is not None:
            visit(s, times[s], cur)
        cur = cur + drift_sign * dt * u.eval(times[s], cur) + noise[:, s, :]
    return cur


def _check_escapes(escaped):
    if escaped is not None and escaped.mean() > ESCAPE_ABORT_FRACTION:
        raise EscapedPathsError(f"{escaped.mean():.2%} of paths left the bounding box")


def backward_times(t, t_end, dt):
    n = n_steps_for(t - t_end, dt)
    times = np.maximum(t - dt * np.arange(n + 1), t_end)
    if n:
        times[-1] = t_end
    return times


def simulate_backward_flow(u, t, x_batch, cfg: FlowConfig, increments=None, t_end=0.0):
    """Backward flow psi_{t, theta}(x) from theta = t down to theta = t_end."""
    x0 = np.atleast_2d(np.asarray(x_batch, dtype=float))
    n = cfg.n_steps(t - t_end)
    _check_time(u, t_end, t)
    inc = _prepare_increments(cfg, n, increments)
    times = backward_times(t, t_end, cfg.dt)
    pos, esc = _integrate(u, x0, times, -1.0, cfg.sigma * inc, cfg.dt, cfg.box_radius)
    _check_escapes(esc)
    return FlowEnsemble(
        t_start=t, t_end=t_end, dt=cfg.dt, sigma=cfg.sigma, direction=BACKWARD, positions=pos, times=times,
        increments=inc if cfg.store_increments else None, escaped=esc, noise_sign=cfg.noise_sign,
        antithetic=cfg.antithetic,
    )


def simulate_forward_flow(u, t, y_batch, cfg: FlowConfig, increments=None, t0=0.0):
    """Forward flow phi_{t0, tau}(y) from tau = t0 up to tau = t."""
    y0 = np.atleast_2d(np.asarray(y_batch, dtype=float))
    n = cfg.n_steps(t - t0)
    _check_time(u, t0, t)
    inc = _prepare_increments(cfg, n, increments)
    times = t0 + cfg.dt * np.arange(n + 1)
    if n:
        times[-1] = t
    noise = cfg.noise_sign * cfg.sigma * inc
    pos, esc = _integrate(u, y0, times, 1.0, noise, cfg.dt, cfg.box_radius)
    _check_escapes(esc)
    return FlowEnsemble(
        t_start=t0, t_end=t, dt=cfg.dt, sigma=cfg.sigma, direction=FORWARD, positions=pos, times=times,
        increments=inc if cfg.store_increments else None, escaped=esc, noise_sign=cfg.noise_sign,
        antithetic=cfg.antithetic,
    )


def reversed_increments(ens: FlowEnsemble):
    """Increments that drive the reversed flow step by step back along ``ens``.

    Step s of the reversed flow undoes step n-1-s of ``ens``; the increment is
    the reversed original, negated when the two flows carry the same noise sign.
    """
    if ens.increments is None:
        raise MissingDataError("time reversal needs stored increments")
    return -ens.noise_sign * ens.increments[:, ::-1, :]


def invert_by_time_reversal(ens: FlowEnsemble, u) -> FlowEnsemble:
    """Run the flow of opposite direction from the endpoints of ``ens``.

    A forward ensemble on [t0, t] yields the backward flow anchored at t, and a
    backward ensemble anchored at t yields the forward flow on [0, t].  Each
    start point of the result is the matching endpoint path by path, so the
    result is a batch of n_points * n_paths single-path flows, reshaped back to
    (n_points, n_paths, ...).
    """
    if ens.increments is None:
        raise MissingDataError("time reversal needs stored increments")
    rev = reversed_increments(ens)
    ends = ens.endpoints
    n_pts, n_paths = ends.shape[:2]
    n = ens.n_steps
    times = ens.times[::-1].copy()
    if ens.direction == FORWARD:
        noise = ens.sigma * rev
        drift_sign, direction = -1.0, BACKWARD
    else:
        noise = ens.noise_sign * ens.sigma * rev
        drift_sign, direction = 1.0, FORWARD
    pos = np.empty((n_pts, n_paths, n + 1, 3))
    pos[:, :, 0, :] = ends
    for s in range(n):
        cur = pos[:, :, s, :]
        pos[:, :, s + 1, :] = cur + drift_sign * ens.dt * u.eval(times[s], cur) + noise[None, :, s, :]
    return FlowEnsemble(
        t_start=float(times[0]), t_end=float(times[-1]), dt=ens.dt, sigma=ens.sigma, direction=direction,
        positions=pos, times=times, increments=rev, escaped=None, noise_sign=ens.noise_sign,
        antithetic=ens.antithetic, meta={"reversed_from": ens.direction},
    )


def roundtrip_error(ens: FlowEnsemble, u):
    """Distances between start points and the reversed flow's endpoints, shape (n_points, n_paths)."""
    back = invert_by_time_reversal(ens, u)
    return np.linalg.norm(back.endpoints - ens.positions[:, :, 0, :], axis=-1)


def simulate_jacobian(u, ens: FlowEnsemble, store="all") -> JacobianPath:
    """Jacobian of the discrete flow map with respect to the start point.

    eta_{s+1} = (I - dt grad u(theta_s, psi_s)) eta_s for backward flows and
    (I + dt grad u) eta_s for forward flows, with eta_0 = I.  No
    renormalisation is applied, so det eta - 1 is an honest diagnostic.
    ``store="final"`` keeps only the first and last steps.
    """
    sign = -1.0 if ens.direction == BACKWARD else 1.0
    n_pts, n_paths, n1, _ = ens.positions.shape
    cur = np.broadcast_to(np.eye(3), (n_pts, n_paths, 3, 3)).copy()
    if store == "all":
        eta = np.empty((n_pts, n_paths, n1, 3, 3))
        eta[:, :, 0] = cur
    elif store == "final":
        eta = np.empty((n_pts, n_paths, 2, 3, 3))
        eta[:, :, 0] = cur
    else:
        raise ValueError("store must be 'all' or 'final'")
    for s in range(n1 - 1):
        g = u.gradient(ens.times[s], ens.positions[:, :, s, :])
        cur = cur + sign * ens.dt * np.einsum("...ij,...jk->...ik", g, cur)
        if store == "all":
            eta[:, :, s + 1] = cur
    times = ens.times
    if store == "final":
        eta[:, :, 1] = cur
        times = ens.times[[0, -1]]
    return JacobianPath(eta=eta, times=times)


def stochastic_integral_eta(ens: FlowEnsemble, jac: JacobianPath, tau):
    """Left-point Ito sum of eta^T dW over the steps between the anchor and ``tau``.

    Component k of the result is sum_j sum_i eta_j[i, k] dW_j[i], the weight
    used by the Bismut-Elworthy-Li gradient estimator.  Shape (n_points,
    n_paths, 3).  The caller divides by sigma * (t - tau).
    """
    if ens.sigma == 0.0:
        raise EulerModeError("the stochastic weight is undefined for sigma = 0; use finite differences")
    if ens.increments is None:
        raise MissingDataError("stochastic integral needs stored increments")
    m = n_steps_for(abs(ens.t_start - tau), ens.dt)
    if m > ens.n_steps:
        raise ValueError("tau lies outside the ensemble's time span")
    if m > 0 and jac.eta.shape[2] < m:
        raise MissingDataError("Jacobian was stored with store='final'; per-step values are needed")
    if m == 0:
        return np.zeros(ens.positions.shape[:2] + (3,))
    eta = jac.eta[:, :, :m]
    dW = ens.increments[None, :, :m, :]
    return np.einsum("npsik,npsi->npk", eta, np.broadcast_to(dW, eta.shape[:3] + (3,)))


def lipschitz_bound(grad_sup, t):
    """Growth factor e^{L t} for common-noise separation of two starts."""
    return math.exp(grad_sup * t)


def coarsen_increments(increments, factor):
    """Sum consecutive groups of ``factor`` increments (same Brownian path, coarser dt)."""
    inc = np.asarray(increments)
    n = inc.shape[1]
    if n % factor:
        raise ValueError("step count must be divisible by the coarsening factor")
    return inc.reshape(inc.shape[0], n // factor, factor, 3).sum(axis=2)
