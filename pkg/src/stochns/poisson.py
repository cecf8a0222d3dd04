"""Newton potential and its Brownian (Feynman-Kac) representations.

Convention: ``-lap p = gamma``.  With B a standard Brownian motion (generator
lap/2) the pressure and its gradient are

    p(x)    = 1/2 int_0^inf E gamma(x + B(tau)) dtau                 = N gamma(x)
    grad p  = 1/2 int_0^inf (1/tau) E[gamma(x + B(tau)) B(tau)] dtau

The time integrals are truncated at ``t_max`` and discretised by a left-point
sum with step ``dt_bm``.  The first cell of the gradient integral is replaced
by its small-tau limit ``grad gamma(x) * dt_bm / 2``.

On a periodic cube gamma is represented by its Fourier modes, so evaluating
gamma(x + B) along a path reduces to phase sums that serve every evaluation
point at once.  On the whole space gamma is evaluated directly and pressure
paths are stopped on leaving the ball of radius ``3 * support_radius``; the
remaining contribution is the exterior monopole potential M / (4 pi r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fields as F
from . import rng
from ._kernels import fourier_multiplier_sums, fourier_path_sums
from .errors import NoSolutionError, UnsupportedDomainError

_BLOCK = 256
_LABEL_P = 0x5053  # stream label for pressure paths


@dataclass(frozen=True)
class PoissonConfig:
    n_paths: int = 8192
    dt_bm: float = 1e-3
    t_max: float = 20.0
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if not self.dt_bm > 0:
            raise ValueError("dt_bm must be positive")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even n_paths")

    @property
    def n_steps(self):
        return max(1, int(round(self.t_max / self.dt_bm)))


@dataclass
class MCResult:
    """Estimate per evaluation point with its standard error and diagnostics."""

    value: np.ndarray
    std_err: np.ndarray
    tail: np.ndarray
    truncation_warning: bool
    samples: np.ndarray | None = None
    exit_residual_bound: float = 0.0
    unexited_fraction: float = 0.0


# --------------------------------------------------------------------------
# deterministic solvers


def _check_zero_mean(g, what="gamma"):
    scale = np.abs(g).max() if g.size else 0.0
    if abs(g.mean()) > 1e-10 * max(scale, 1e-300):
        raise NoSolutionError(f"{what} has nonzero mean {g.mean():.3e}; the periodic Poisson problem has no solution")


def spectral_poisson(gamma_grid, domain):
    """Periodic solution of -lap p = gamma on the grid: returns (p, grad p, hess p)."""
    g = np.asarray(gamma_grid, dtype=float)
    _check_zero_mean(g)
    kx, ky, kz = domain.wavenumbers()
    k2 = kx**2 + ky**2 + kz**2
    k2[0, 0, 0] = 1.0
    ph = np.fft.fftn(g) / k2
    ph[0, 0, 0] = 0.0
    ks = (kx, ky, kz)
    # odd derivatives (gradient, mixed second derivatives) drop the Nyquist wavenumber
    ko = domain.wavenumbers(nyquist=False)
    p = np.real(np.fft.ifftn(ph))
    grad = np.stack([np.real(np.fft.ifftn(1j * k * ph)) for k in ko], axis=-1)
    hess = np.empty(g.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            kk = ks[i] * ks[i] if i == j else ko[i] * ko[j]
            hij = np.real(np.fft.ifftn(-kk * ph))
            hess[..., i, j] = hij
            hess[..., j, i] = hij
    return p, grad, hess


def _ball_monopole(gamma, t, R, n=48):
    """Mass, centre and L^1 norm of gamma inside the support ball of radius R."""
    c0 = np.asarray(getattr(gamma, "center", (0.0, 0.0, 0.0)), float)
    if getattr(gamma, "mass", None) is not None and isinstance(gamma, F.GaussianBump) and gamma.amplitude >= 0:
        return float(gamma.mass), c0, float(gamma.mass)
    a = (np.arange(n) + 0.5) / n * 2 * R - R
    pts = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3) + c0
    pts = pts[np.sum((pts - c0) ** 2, axis=-1) <= R * R]
    w = (2 * R / n) ** 3
    vals = gamma.eval(t, pts)
    mass = float(vals.sum() * w)
    if getattr(gamma, "mass", None) is not None:
        mass = float(gamma.mass)
    cen = (vals[:, None] * pts).sum(axis=0) * w / mass if mass != 0 else c0
    return mass, cen, float(np.abs(vals).sum() * w)


def newton_potential_quadrature(gamma, x, domain, t=0.0, n_panels=32, n_theta=32, n_phi=64, center=None):
    """Newton potential (1/4pi) int gamma(y)/|x-y| dy.

    WholeSpace: product Gauss-Legendre quadrature in spherical coordinates
    centred at x (radial panels up to the far edge of the support ball, which
    is centred at ``center`` or the field's ``center`` attribute or the origin).
    PeriodicCube: FFT inversion of -lap on the grid, evaluated with the
    trigonometric interpolant; gamma must have zero mean.
    """
    x = F._as_points(x)
    if isinstance(domain, F.PeriodicCube):
        g = F.sample(gamma, domain, t)
        p, _, _ = spectral_poisson(g, domain)
        return F.spectral_eval(np.fft.fftn(p), domain.side, x)
    R = domain.support_radius
    c = np.asarray(center if center is not None else getattr(gamma, "center", (0.0, 0.0, 0.0)), float)
    xr, wr = np.polynomial.legendre.leggauss(8)
    mu, wmu = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * (2 * math.pi / n_phi)
    wphi = 2 * math.pi / n_phi
    st = np.sqrt(1 - mu**2)
    omega = np.stack(
        [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(mu, np.ones_like(phi))], axis=-1
    ).reshape(-1, 3)
    w_ang = np.outer(wmu, np.full(n_phi, wphi)).ravel()
    lead = x.shape[:-1]
    out = []
    for xp in x.reshape(-1, 3):
        rmax = np.linalg.norm(xp - c) + R
        edges = np.linspace(0.0, rmax, n_panels + 1)
        total = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            r = 0.5 * (b - a) * xr + 0.5 * (b + a)
            wr_ = 0.5 * (b - a) * wr
            pts = xp + r[:, None, None] * omega[None, :, :]
            vals = gamma.eval(t, pts)
            total += np.sum(wr_[:, None] * r[:, None] * w_ang[None, :] * vals)
        out.append(total / (4 * math.pi))
    return np.asarray(out).reshape(lead)


def heat_integrand(gamma, domain, x, taus, t=0.0):
    """Exact E gamma(x + B(tau)) for periodic gamma (heat semigroup in Fourier space)."""
    g = F.sample(gamma, domain, t)
    kx, ky, kz = domain.wavenumbers()
    k2 = kx**2 + ky**2 + kz**2
    gh = np.fft.fftn(g)
    x = F._as_points(x)
    return np.stack([F.spectral_eval(gh * np.exp(-0.5 * k2 * tau), domain.side, x) for tau in np.atleast_1d(taus)])


def truncation_tail(gamma, domain, t_max, t=0.0):
    """Largest relative size of the neglected tail int_{t_max}^inf E gamma dtau over the grid."""
    g = F.sample(gamma, domain, t)
    _check_zero_mean(g)
    kx, ky, kz = domain.wavenumbers()
    k2 = kx**2 + ky**2 + kz**2
    k2[0, 0, 0] = 1.0
    gh = np.fft.fftn(g)
    gh[0, 0, 0] = 0.0
    full = np.real(np.fft.ifftn(2 * gh / k2))
    tail = np.real(np.fft.ifftn(2 * gh * np.exp(-0.5 * k2 * t_max) / k2))
    return float(np.abs(tail).max() / np.abs(full).max())


def calderon_zygmund_check(gamma, domain, t=0.0):
    """Parseval sums of int |hess N gamma|_F^2 and int gamma^2 over the periodic cube."""
    if not isinstance(domain, F.PeriodicCube):
        raise UnsupportedDomainError("the spectral identity is evaluated on a PeriodicCube")
    g = F.sample(gamma, domain, t)
    _check_zero_mean(g)
    n3 = g.size
    kx, ky, kz = domain.wavenumbers()
    ks = (kx, ky, kz)
    k2 = kx**2 + ky**2 + kz**2
    k2[0, 0, 0] = 1.0
    gh = np.fft.fftn(g)
    gh[0, 0, 0] = 0.0
    ph = gh / k2
    lhs = 0.0
    for i in range(3):
        for j in range(3):
            lhs += np.sum(np.abs(ks[i] * ks[j] * ph) ** 2)
    scale = domain.cell_volume / n3
    return float(lhs * scale), float(np.sum(np.abs(gh) ** 2) * scale)


# --------------------------------------------------------------------------
# Monte Carlo estimators


def _blocks(cfg):
    """(block index, block size) covering n_paths; sizes are fixed by the config only."""
    out = []
    left = cfg.n_paths
    b = 0
    while left > 0:
        size = min(_BLOCK, left)
        if cfg.antithetic and size % 2:
            size += 1
        out.append((b, size))
        left -= size
        b += 1
    return out


def _block_normals(cfg, b, size, n, expand=True):
    """Standard normals for one path block.

    With antithetic sampling and ``expand=False`` only the base half is
    returned; compiled kernels generate the negated partners themselves.
    """
    if cfg.antithetic and not expand:
        return rng.stream(cfg.seed, _LABEL_P, b).standard_normal((size // 2, n, 3))
    return rng.gaussian_increments(cfg.seed, (_LABEL_P, b), size, n, 1.0, antithetic=cfg.antithetic)


def _finish(samples, tails, cfg, keep_samples, **extra):
    s = np.concatenate(samples, axis=0)
    n = s.shape[0]
    mean = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    tail = np.abs(np.concatenate(tails, axis=0).mean(axis=0))
    warn = bool(np.any(tail > 10 * np.maximum(se, 1e-300) * (se > 0)))
    return MCResult(mean, se, tail, warn, s if keep_samples else None, **extra)


def _pair(v, antithetic):
    return rng.pair_means(v, antithetic)


def _periodic_modes(gamma, domain, t):
    g = F.sample(gamma, domain, t)
    _check_zero_mean(g)
    m, c = F.sparse_modes(g, domain)
    return m, c


def _periodic_mc(gamma, t, x, cfg, domain, want_grad, keep_samples):
    x = F._as_points(x)
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    m, c = _periodic_modes(gamma, domain, t)
    kscale = 2 * math.pi / domain.side
    k = m * kscale
    E = c[:, None] * np.exp(1j * (k @ pts.T))  # (M, P)
    n = cfg.n_steps
    n_tail = max(1, n // 10)
    samples, tails = [], []
    if len(m) == 0:
        shape = (cfg.n_paths // (2 if cfg.antithetic else 1), pts.shape[0]) + ((3,) if want_grad else ())
        z = np.zeros(shape)
        res = _finish([z], [z], cfg, keep_samples)
        return _reshape(res, lead, want_grad)
    if want_grad:
        sing = 0.5 * cfg.dt_bm * np.real(np.einsum("mp,md->pd", 1j * E, k))
    for b, size in _blocks(cfg):
        Z = _block_normals(cfg, b, size, n, expand=False)
        S, St, T, Tt = fourier_path_sums(m.astype(np.int64), kscale, Z, cfg.dt_bm, n_tail, want_grad, cfg.antithetic)
        if want_grad:
            v = 0.5 * np.real(np.einsum("qmd,mp->qpd", T, E)) + sing[None]
            tv = 0.5 * np.real(np.einsum("qmd,mp->qpd", Tt, E))
        else:
            v = 0.5 * np.real(S @ E)
            tv = 0.5 * np.real(St @ E)
        samples.append(_pair(v, cfg.antithetic))
        tails.append(_pair(tv, cfg.antithetic))
    return _reshape(_finish(samples, tails, cfg, keep_samples), lead, want_grad)


def _reshape(res, lead, want_grad):
    tail_shape = lead + ((3,) if want_grad else ())
    res.value = res.value.reshape(tail_shape)
    res.std_err = res.std_err.reshape(tail_shape)
    res.tail = res.tail.reshape(tail_shape)
    if res.samples is not None:
        res.samples = res.samples.reshape((res.samples.shape[0],) + tail_shape)
    return res


def _whole_space_mc(gamma, t, x, cfg, domain, want_grad, keep_samples):
    x = F._as_points(x)
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    n = cfg.n_steps
    dt = cfg.dt_bm
    R = domain.support_radius
    rho = 3.0 * R
    mass, cen, l1 = _ball_monopole(gamma, t, R)
    # bound on |N gamma - M / (4 pi |y - c|)| at |y - c| = rho for support within R of c
    residual_bound = l1 * R / (4 * math.pi * rho * (rho - R))
    n_tail = max(1, n // 10)
    samples, tails = [], []
    unexited = 0
    total = 0
    if want_grad:
        sing = 0.5 * dt * gamma.gradient(t, pts)  # (P, 3)
    for b, size in _blocks(cfg):
        Z = _block_normals(cfg, b, size, n)
        B = np.concatenate([np.zeros((size, 1, 3)), np.cumsum(Z[:, :-1, :] * math.sqrt(dt), axis=1)], axis=1)
        v = np.empty((size, pts.shape[0]) + ((3,) if want_grad else ()))
        tv = np.empty_like(v)
        for ip, xp in enumerate(pts):
            y = xp + B  # (size, n, 3)
            gv = gamma.eval(t, y)
            if want_grad:
                w = np.zeros(n)
                w[1:] = 1.0 / np.arange(1, n)
                v[:, ip] = 0.5 * np.einsum("qs,s,qsd->qd", gv, w, B) + sing[ip]
                tv[:, ip] = 0.5 * np.einsum("qs,s,qsd->qd", gv[:, -n_tail:], w[-n_tail:], B[:, -n_tail:])
            else:
                r = np.linalg.norm(y - cen, axis=-1)
                out = r > rho
                exited = out.any(axis=1)
                first = np.where(exited, out.argmax(axis=1), n)
                mask = np.arange(n)[None, :] < first[:, None]
                acc = 0.5 * dt * np.sum(gv * mask, axis=1)
                corr = np.zeros(size)
                ye = y[np.arange(size), np.minimum(first, n - 1)]
                corr[exited] = mass / (4 * math.pi * np.linalg.norm(ye[exited] - cen, axis=-1))
                v[:, ip] = acc + corr
                tv[:, ip] = 0.5 * dt * np.sum((gv * mask)[:, -n_tail:], axis=1)
                unexited += int((~exited).sum())
                total += size
        samples.append(_pair(v, cfg.antithetic))
        tails.append(_pair(tv, cfg.antithetic))
    res = _finish(
        samples,
        tails,
        cfg,
        keep_samples,
        exit_residual_bound=0.0 if want_grad else residual_bound,
        unexited_fraction=(unexited / total) if total else 0.0,
    )
    if not want_grad and res.unexited_fraction > 0.01:
        res.truncation_warning = True
    return _reshape(res, lead, want_grad)


def pressure_mc(gamma, t, x, cfg, domain, keep_samples=False):
    """Brownian estimate of p(x) with -lap p = gamma; returns an MCResult."""
    if isinstance(domain, F.PeriodicCube):
        return _periodic_mc(gamma, t, x, cfg, domain, False, keep_samples)
    return _whole_space_mc(gamma, t, x, cfg, domain, False, keep_samples)


def grad_pressure_mc(gamma, t, x, cfg, domain, keep_samples=False):
    """Bismut-type estimate of grad p(x); value has a trailing axis of length 3."""
    if isinstance(domain, F.PeriodicCube):
        return _periodic_mc(gamma, t, x, cfg, domain, True, keep_samples)
    return _whole_space_mc(gamma, t, x, cfg, domain, True, keep_samples)


# --------------------------------------------------------------------------
# grid-wide Monte Carlo multiplier (used by the Picard driver)


@dataclass
class PressureMultiplier:
    """Monte Carlo Fourier multipliers: p_hat = gamma_hat * P, grad_p_hat = gamma_hat * G."""

    P: np.ndarray
    G: np.ndarray

    def solve(self, gamma_grid):
        g = np.asarray(gamma_grid, dtype=float)
        _check_zero_mean(g)
        gh = np.fft.fftn(g)
        gh[0, 0, 0] = 0.0
        p = np.real(np.fft.ifftn(gh * self.P))
        grad = np.stack([np.real(np.fft.ifftn(gh * self.G[..., d])) for d in range(3)], axis=-1)
        return p, grad


def mc_pressure_multiplier(domain, cfg):
    """Estimate the pressure multipliers with one set of Brownian paths shared by all grid points.

    Evaluating the two path integrals for gamma(x + B) with gamma written as a
    Fourier series makes the estimator, for every x simultaneously, a
    per-wavenumber multiplier.  Its expectation is (1 - exp(-|k|^2 t_max/2))/|k|^2
    for the pressure and i k / |k|^2 (up to truncation) for the gradient.
    """
    n = cfg.n_steps
    kscale = 2 * math.pi / domain.side
    ng = domain.grid_n
    Ssum = np.zeros((ng, ng, ng), dtype=np.complex128)
    Tsum = np.zeros((ng, ng, ng, 3), dtype=np.complex128)
    for b, size in _blocks(cfg):
        Z = _block_normals(cfg, b, size, n, expand=False)
        s, tt = fourier_multiplier_sums(ng, kscale, Z, cfg.dt_bm, cfg.antithetic)
        Ssum += s
        Tsum += tt
    N = sum(size for _, size in _blocks(cfg))
    kx, ky, kz = domain.wavenumbers()
    P = 0.5 * Ssum / N
    G = 0.5 * Tsum / N + 0.5 * cfg.dt_bm * 1j * np.stack([kx, ky, kz], axis=-1)
    P[0, 0, 0] = 0.0
    G[0, 0, 0] = 0.0
    if ng % 2 == 0:
        # same Nyquist convention as the spectral gradient
        G[ng // 2, :, :, 0] = 0.0
        G[:, ng // 2, :, 1] = 0.0
        G[:, :, ng // 2, 2] = 0.0
    return PressureMultiplier(P, G)
