"""Velocity and pressure fields on a periodic cube or on the whole space.

Two storage kinds share one evaluation interface:

* analytic families (Beltrami/ABC, Taylor-Green, constant, rigid rotation,
  Gaussian bumps, affine maps), evaluated exactly at any ``(t, x)``;
* grid-sampled fields on a uniform periodic grid with a time grid, evaluated by
  trilinear interpolation in space (periodic wrap) and linear interpolation in
  time.

Gradients use the row convention ``grad[..., i, k] = d u_i / d x_k``.

L^q norms are Riemann sums over the periodic cube; the cube plays the role of
the compact set on which local norms are taken.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import FieldDataError, OutOfRangeError, UnsupportedDomainError

TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class PeriodicCube:
    side: float = TWO_PI
    grid_n: int = 16

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("side must be positive")
        if self.grid_n < 4:
            raise ValueError("grid_n must be >= 4")

    @property
    def h(self):
        return self.side / self.grid_n

    @property
    def volume(self):
        return self.side**3

    @property
    def cell_volume(self):
        return self.h**3

    def axis(self):
        return np.arange(self.grid_n) * self.h

    def nodes(self):
        """Grid nodes, shape ``(n, n, n, 3)`` indexed ``[ix, iy, iz]``."""
        a = self.axis()
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    def wavenumbers(self, nyquist=True):
        """Angular wavenumber grids.

        With ``nyquist=False`` the Nyquist wavenumber (even grids) is set to
        zero.  Odd derivatives need this: the Nyquist index is its own mirror,
        so a nonzero value there breaks the Hermitian symmetry of real data.
        """
        k = np.fft.fftfreq(self.grid_n, d=self.h) * TWO_PI
        if not nyquist and self.grid_n % 2 == 0:
            k[self.grid_n // 2] = 0.0
        return np.meshgrid(k, k, k, indexing="ij")


@dataclass(frozen=True)
class WholeSpace:
    support_radius: float = 3.0

    def __post_init__(self):
        if not self.support_radius > 0:
            raise ValueError("support_radius must be positive")


# --------------------------------------------------------------------------
# grid utilities


def _as_points(x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    return x


def _cell_coords(x, h, n):
    s = x / h
    r = np.rint(s)
    # snap near-integers so that nodes reproduce stored samples exactly
    s = np.where(np.abs(s - r) < 1e-9, r, s)
    i0 = np.floor(s)
    f = s - i0
    i0 = i0.astype(np.int64) % n
    return i0, f


def trilinear(values, h, x):
    """Periodic trilinear interpolation of grid ``values`` (n, n, n, ...) at points x."""
    x = _as_points(x)
    n = values.shape[0]
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    i0, f = _cell_coords(pts, h, n)
    i1 = (i0 + 1) % n
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    tail = values.shape[3:]
    shp = (-1,) + (1,) * len(tail)
    out = np.zeros((pts.shape[0],) + tail)
    for cx, wx in ((i0[:, 0], 1.0 - fx), (i1[:, 0], fx)):
        for cy, wy in ((i0[:, 1], 1.0 - fy), (i1[:, 1], fy)):
            for cz, wz in ((i0[:, 2], 1.0 - fz), (i1[:, 2], fz)):
                w = (wx * wy * wz).reshape(shp)
                out += w * values[cx, cy, cz]
    return out.reshape(lead + tail)


def fd_gradient(values, h):
    """Centered second-order differences on a periodic grid.

    ``values`` has shape (n, n, n) or (n, n, n, C); the result gains a trailing
    axis of length 3 holding the derivative along x, y, z.
    """
    parts = [(np.roll(values, -1, axis=a) - np.roll(values, 1, axis=a)) / (2.0 * h) for a in range(3)]
    return np.stack(parts, axis=-1)


def spectral_gradient(values, domain):
    """Spectral derivative of periodic grid data, same layout as ``fd_gradient``."""
    kx, ky, kz = domain.wavenumbers(nyquist=False)
    ks = (kx, ky, kz)
    spatial = (0, 1, 2)
    vh = np.fft.fftn(values, axes=spatial)
    extra = values.ndim - 3
    parts = []
    for k in ks:
        kk = k.reshape(k.shape + (1,) * extra)
        parts.append(np.real(np.fft.ifftn(1j * kk * vh, axes=spatial)))
    return np.stack(parts, axis=-1)


def grid_gradient(values, domain, method="fd"):
    if method == "fd":
        return fd_gradient(values, domain.h)
    if method == "spectral":
        return spectral_gradient(values, domain)
    raise ValueError(f"unknown gradient method {method!r}")


def spectral_eval(coeffs, side, x):
    """Evaluate the trigonometric interpolant of grid data at arbitrary points.

    ``coeffs`` is the output of ``fftn`` over the three spatial axes.  Cost is
    O(n^3) per point, so this is meant for small point sets.
    """
    x = _as_points(x)
    n = coeffs.shape[0]
    k = np.fft.fftfreq(n, d=1.0 / n) * (TWO_PI / side)
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3)
    ex = np.exp(1j * np.outer(pts[:, 0], k))
    ey = np.exp(1j * np.outer(pts[:, 1], k))
    ez = np.exp(1j * np.outer(pts[:, 2], k))
    tail = coeffs.shape[3:]
    c = coeffs.reshape(n, n, n, -1)
    out = np.einsum("pa,pb,pc,abcq->pq", ex, ey, ez, c, optimize=True)
    return np.real(out).reshape(lead + tail) / n**3


def sparse_modes(values, domain, rel_tol=1e-12):
    """Fourier modes of periodic grid data with non-negligible amplitude.

    Returns integer wave indices ``m`` (shape (M, 3), physical wavenumber
    ``2 pi m / side``) and complex coefficients ``c`` (shape (M, ...)) such that
    ``f(x) = Re sum_j c_j exp(i k_j . x)`` reproduces the trigonometric
    interpolant.  Nyquist modes are dropped (they are not representable as a
    real band-limited function on the grid).
    """
    n = domain.grid_n
    vh = np.fft.fftn(values, axes=(0, 1, 2)) / n**3
    flat = vh.reshape(n, n, n, -1)
    amp = np.abs(flat).max(axis=-1)
    scale = amp.max()
    idx = np.fft.fftfreq(n, d=1.0 / n).astype(int)
    keep = amp > rel_tol * max(scale, 1e-300)
    if n % 2 == 0:
        ny = np.abs(idx) == n // 2
        keep &= ~(ny[:, None, None] | ny[None, :, None] | ny[None, None, :])
    ii = np.argwhere(keep)
    m = np.stack([idx[ii[:, 0]], idx[ii[:, 1]], idx[ii[:, 2]]], axis=-1)
    c = flat[ii[:, 0], ii[:, 1], ii[:, 2]]
    return m, c.reshape((len(m),) + values.shape[3:])


# --------------------------------------------------------------------------
# field interface


class VectorField:
    """Time-dependent vector field u(t, x) in R^3."""

    is_grid = False
    ncomp = 3

    def eval(self, t, x):
        raise NotImplementedError

    def gradient(self, t, x):
        raise NotImplementedError

    def t_range(self):
        return (-math.inf, math.inf)


class ScalarField:
    """Time-dependent scalar field f(t, x)."""

    is_grid = False
    ncomp = 1

    def eval(self, t, x):
        raise NotImplementedError

    def gradient(self, t, x):
        raise NotImplementedError

    def t_range(self):
        return (-math.inf, math.inf)


def evaluate(field, t, x):
    """Value of a vector or scalar field at time ``t`` and point(s) ``x``."""
    return field.eval(t, x)


def gradient(field, t, x):
    """Spatial gradient; for vector fields entry (i, k) is d_k u_i."""
    return field.gradient(t, x)


# --------------------------------------------------------------------------
# analytic families


@dataclass(frozen=True)
class Zero(VectorField):
    def eval(self, t, x):
        return np.zeros_like(_as_points(x))

    def gradient(self, t, x):
        x = _as_points(x)
        return np.zeros(x.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class Constant(VectorField):
    c: tuple = (0.0, 0.0, 0.0)

    def eval(self, t, x):
        x = _as_points(x)
        return np.broadcast_to(np.asarray(self.c, dtype=float), x.shape).copy()

    def gradient(self, t, x):
        x = _as_points(x)
        return np.zeros(x.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class RigidRotation(VectorField):
    """u(x) = omega x x."""

    omega: tuple = (0.0, 0.0, 1.0)

    def eval(self, t, x):
        x = _as_points(x)
        return np.cross(np.broadcast_to(np.asarray(self.omega, float), x.shape), x)

    def gradient(self, t, x):
        x = _as_points(x)
        w = np.asarray(self.omega, float)
        m = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
        return np.broadcast_to(m, x.shape[:-1] + (3, 3)).copy()


@dataclass(frozen=True)
class Linear(VectorField):
    """Affine field u(x) = A x + b, constant in time."""

    A: tuple = ((0.0, 0.0, 0.0),) * 3
    b: tuple = (0.0, 0.0, 0.0)

    def eval(self, t, x):
        x = _as_points(x)
        return x @ np.asarray(self.A, float).T + np.asarray(self.b, float)

    def gradient(self, t, x):
        x = _as_points(x)
        return np.broadcast_to(np.asarray(self.A, float), x.shape[:-1] + (3, 3)).copy()


@dataclass(frozen=True)
class Beltrami(VectorField):
    """ABC flow decaying at rate nu; an exact Navier-Stokes solution with p = -|u|^2/2."""

    A: float = 1.0
    B: float = 1.0
    C: float = 1.0
    nu: float = 0.0

    def eval(self, t, x):
        x = _as_points(x)
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        d = math.exp(-self.nu * t)
        return d * np.stack(
            [
                self.A * np.sin(Z) + self.C * np.cos(Y),
                self.B * np.sin(X) + self.A * np.cos(Z),
                self.C * np.sin(Y) + self.B * np.cos(X),
            ],
            axis=-1,
        )

    def gradient(self, t, x):
        x = _as_points(x)
        X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
        d = math.exp(-self.nu * t)
        g = np.zeros(x.shape[:-1] + (3, 3))
        g[..., 0, 1] = -self.C * np.sin(Y)
        g[..., 0, 2] = self.A * np.cos(Z)
        g[..., 1, 0] = self.B * np.cos(X)
        g[..., 1, 2] = -self.A * np.sin(Z)
        g[..., 2, 0] = -self.B * np.sin(X)
        g[..., 2, 1] = self.C * np.cos(Y)
        return d * g

    def pressure(self, t, x):
        u = self.eval(t, x)
        return -0.5 * np.sum(u * u, axis=-1)


@dataclass(frozen=True)
class TaylorGreen(VectorField):
    """Two-dimensional Taylor-Green vortex embedded in R^3 (u_z = 0)."""

    nu: float = 0.0

    def eval(self, t, x):
        x = _as_points(x)
        X, Y = x[..., 0], x[..., 1]
        d = math.exp(-2.0 * self.nu * t)
        return d * np.stack([np.sin(X) * np.cos(Y), -np.cos(X) * np.sin(Y), np.zeros_like(X)], axis=-1)

    def gradient(self, t, x):
        x = _as_points(x)
        X, Y = x[..., 0], x[..., 1]
        d = math.exp(-2.0 * self.nu * t)
        g = np.zeros(x.shape[:-1] + (3, 3))
        g[..., 0, 0] = np.cos(X) * np.cos(Y)
        g[..., 0, 1] = -np.sin(X) * np.sin(Y)
        g[..., 1, 0] = np.sin(X) * np.sin(Y)
        g[..., 1, 1] = -np.cos(X) * np.cos(Y)
        return d * g

    def pressure(self, t, x):
        x = _as_points(x)
        d = math.exp(-4.0 * self.nu * t)
        return 0.25 * d * (np.cos(2 * x[..., 0]) + np.cos(2 * x[..., 1]))


@dataclass(frozen=True)
class VectorGaussianBump(VectorField):
    center: tuple = (0.0, 0.0, 0.0)
    width: float = 1.0
    amplitude: tuple = (1.0, 0.0, 0.0)

    def _g(self, x):
        r = x - np.asarray(self.center, float)
        return r, np.exp(-np.sum(r * r, axis=-1) / (2.0 * self.width**2))

    def eval(self, t, x):
        r, g = self._g(_as_points(x))
        return g[..., None] * np.asarray(self.amplitude, float)

    def gradient(self, t, x):
        r, g = self._g(_as_points(x))
        a = np.asarray(self.amplitude, float)
        return -(g / self.width**2)[..., None, None] * a[:, None] * r[..., None, :]


# scalar families


@dataclass(frozen=True)
class ZeroScalar(ScalarField):
    def eval(self, t, x):
        return np.zeros(_as_points(x).shape[:-1])

    def gradient(self, t, x):
        return np.zeros_like(_as_points(x))


@dataclass(frozen=True)
class ConstantScalar(ScalarField):
    c: float = 0.0

    def eval(self, t, x):
        return np.full(_as_points(x).shape[:-1], float(self.c))

    def gradient(self, t, x):
        return np.zeros_like(_as_points(x))


@dataclass(frozen=True)
class GaussianBump(ScalarField):
    """amplitude * exp(-|x - center|^2 / (2 width^2))."""

    center: tuple = (0.0, 0.0, 0.0)
    width: float = 1.0
    amplitude: float = 1.0

    def eval(self, t, x):
        r = _as_points(x) - np.asarray(self.center, float)
        return self.amplitude * np.exp(-np.sum(r * r, axis=-1) / (2.0 * self.width**2))

    def gradient(self, t, x):
        r = _as_points(x) - np.asarray(self.center, float)
        g = self.amplitude * np.exp(-np.sum(r * r, axis=-1) / (2.0 * self.width**2))
        return -(g / self.width**2)[..., None] * r

    @property
    def mass(self):
        return self.amplitude * (TWO_PI * self.width**2) ** 1.5


@dataclass(frozen=True)
class FunctionScalar(ScalarField):
    """Scalar field from vectorised callables ``fn(t, x)`` and optional ``grad(t, x)``.

    ``mass`` and ``center`` may be supplied for whole-space Poisson problems
    (used by the exit-time correction).
    """

    fn: object = None
    grad: object = None
    mass: float | None = None
    center: tuple = (0.0, 0.0, 0.0)

    def eval(self, t, x):
        return np.asarray(self.fn(t, _as_points(x)), dtype=float)

    def gradient(self, t, x):
        x = _as_points(x)
        if self.grad is not None:
            return np.asarray(self.grad(t, x), dtype=float)
        h = 1e-5
        out = np.empty(x.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            out[..., k] = (self.eval(t, x + e) - self.eval(t, x - e)) / (2 * h)
        return out


# --------------------------------------------------------------------------
# grid-sampled fields


def _check_time_grid(time_grid):
    tg = np.atleast_1d(np.asarray(time_grid, dtype=float))
    if tg.ndim != 1 or tg.size < 1:
        raise FieldDataError("time grid must be a non-empty 1-D sequence")
    if tg.size > 1 and np.any(np.diff(tg) <= 0):
        raise FieldDataError("time grid must be strictly increasing")
    return tg


def _time_weights(tg, t):
    lo, hi = tg[0], tg[-1]
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if t < lo - tol or t > hi + tol:
        raise OutOfRangeError(f"t={t} outside time grid [{lo}, {hi}]")
    if tg.size == 1:
        return 0, 0, 1.0
    t = min(max(t, lo), hi)
    j = int(np.searchsorted(tg, t, side="right") - 1)
    j = min(max(j, 0), tg.size - 2)
    span = tg[j + 1] - tg[j]
    w = (t - tg[j]) / span
    if abs(w) < 1e-9:
        return j, j + 1, 1.0
    if abs(w - 1.0) < 1e-9:
        return j, j + 1, 0.0
    return j, j + 1, 1.0 - w


class _GridMixin:
    interp = "linear"

    def _setup(self, domain, time_grid, values, grad_values, interp, tail):
        if not isinstance(domain, PeriodicCube):
            raise UnsupportedDomainError("grid fields live on a PeriodicCube")
        tg = _check_time_grid(time_grid)
        n = domain.grid_n
        v = np.asarray(values, dtype=float)
        if v.shape == (n, n, n) + tail and tg.size == 1:
            v = v[None]
        if v.shape != (tg.size, n, n, n) + tail:
            raise FieldDataError(f"values shape {v.shape} does not match {(tg.size, n, n, n) + tail}")
        if not np.all(np.isfinite(v)):
            raise FieldDataError("grid samples contain NaN or infinite values")
        if interp not in ("linear", "spectral"):
            raise ValueError("interp must be 'linear' or 'spectral'")
        self.domain = domain
        self.time_grid = tg
        self.values = v
        self.values.setflags(write=False)
        self.interp = interp
        self._grad = None
        if grad_values is not None:
            g = np.asarray(grad_values, dtype=float)
            if g.shape == (n, n, n) + tail + (3,) and tg.size == 1:
                g = g[None]
            if g.shape != v.shape + (3,):
                raise FieldDataError(f"gradient shape {g.shape} does not match {v.shape + (3,)}")
            if not np.all(np.isfinite(g)):
                raise FieldDataError("gradient samples contain NaN or infinite values")
            self._grad = g
        self._coeffs = {}

    def t_range(self):
        return (self.time_grid[0], self.time_grid[-1])

    def _interp_array(self, arr, j, x, key):
        if self.interp == "spectral":
            ck = (key, j)
            if ck not in self._coeffs:
                self._coeffs[ck] = np.fft.fftn(arr[j], axes=(0, 1, 2))
            return spectral_eval(self._coeffs[ck], self.domain.side, x)
        return trilinear(arr[j], self.domain.h, x)

    def _sample(self, arr, t, x, key):
        j0, j1, w = _time_weights(self.time_grid, t)
        a = self._interp_array(arr, j0, x, key)
        if w == 1.0:
            return a
        b = self._interp_array(arr, j1, x, key)
        if w == 0.0:
            return b
        return w * a + (1.0 - w) * b

    def at_time(self, t):
        """Grid samples at time t (linear in time)."""
        j0, j1, w = _time_weights(self.time_grid, t)
        if w == 1.0:
            return np.array(self.values[j0])
        if w == 0.0:
            return np.array(self.values[j1])
        return w * self.values[j0] + (1.0 - w) * self.values[j1]

    def grad_grid(self):
        if self._grad is None:
            self._grad = np.stack([fd_gradient(v, self.domain.h) for v in self.values])
        return self._grad

    def grad_at_time(self, t):
        g = self.grad_grid()
        j0, j1, w = _time_weights(self.time_grid, t)
        if w == 1.0:
            return np.array(g[j0])
        if w == 0.0:
            return np.array(g[j1])
        return w * g[j0] + (1.0 - w) * g[j1]

    def eval(self, t, x):
        return self._sample(self.values, t, _as_points(x), "v")

    def gradient(self, t, x):
        return self._sample(self.grad_grid(), t, _as_points(x), "g")


class GridVectorField(_GridMixin, VectorField):
    """Vector samples of shape (n_time, n, n, n, 3) on a PeriodicCube."""

    is_grid = True

    def __init__(self, domain, time_grid, values, grad_values=None, interp="linear"):
        self._setup(domain, time_grid, values, grad_values, interp, (3,))


class GridScalarField(_GridMixin, ScalarField):
    """Scalar samples of shape (n_time, n, n, n) on a PeriodicCube."""

    is_grid = True

    def __init__(self, domain, time_grid, values, grad_values=None, interp="linear"):
        self._setup(domain, time_grid, values, grad_values, interp, ())


def sample(field, domain, t):
    """Grid samples of any field at time t on the domain's nodes."""
    if isinstance(field, _GridMixin) and field.domain == domain:
        return field.at_time(t)
    return np.asarray(field.eval(t, domain.nodes()))


def sample_gradient(field, domain, t):
    if isinstance(field, _GridMixin) and field.domain == domain:
        return field.grad_at_time(t)
    return np.asarray(field.gradient(t, domain.nodes()))


def grid_field(field, domain, time_grid, interp="linear"):
    """Sample an arbitrary field onto a grid field (values and exact gradients when available)."""
    tg = _check_time_grid(time_grid)
    vals = np.stack([sample(field, domain, t) for t in tg])
    grads = np.stack([sample_gradient(field, domain, t) for t in tg])
    cls = GridScalarField if isinstance(field, ScalarField) else GridVectorField
    return cls(domain, tg, vals, grad_values=grads, interp=interp)


# --------------------------------------------------------------------------
# differential and spectral operations


def gamma(u_grad_a, u_grad_b):
    """Tr(a b) = sum_{k,j} a_jk b_kj, broadcasting over leading axes."""
    a = np.asarray(u_grad_a, dtype=float)
    b = np.asarray(u_grad_b, dtype=float)
    return np.einsum("...jk,...kj->...", a, b)


def _require_periodic(field, domain):
    dom = domain if domain is not None else getattr(field, "domain", None)
    if isinstance(dom, WholeSpace):
        raise UnsupportedDomainError("spectral operations need a PeriodicCube domain")
    if dom is None:
        dom = PeriodicCube()
    return dom


def divergence(field, t, method="spectral", domain=None):
    """Pointwise divergence on the periodic grid, returned as a GridScalarField."""
    dom = _require_periodic(field, domain)
    v = sample(field, dom, t)
    if method == "spectral":
        g = spectral_gradient(v, dom)
    elif method == "fd":
        g = fd_gradient(v, dom.h)
    else:
        raise ValueError(f"unknown method {method!r}")
    div = g[..., 0, 0] + g[..., 1, 1] + g[..., 2, 2]
    return GridScalarField(dom, [t], div[None])


def leray_project_array(v, domain):
    """Project grid vector samples (n, n, n, 3) onto divergence-free fields."""
    kx, ky, kz = domain.wavenumbers(nyquist=False)
    k2 = kx**2 + ky**2 + kz**2
    # k = 0 (the mean and pure-Nyquist modes) has no gradient part to remove
    k2[k2 == 0.0] = 1.0
    vh = np.fft.fftn(v, axes=(0, 1, 2))
    kdotv = kx * vh[..., 0] + ky * vh[..., 1] + kz * vh[..., 2]
    out = np.empty_like(vh)
    for c, k in enumerate((kx, ky, kz)):
        out[..., c] = vh[..., c] - k * kdotv / k2
    return np.real(np.fft.ifftn(out, axes=(0, 1, 2)))


def leray_project(field, t, domain=None):
    """FFT Leray projection f - grad lap^{-1} div f at time t (mean mode untouched)."""
    dom = _require_periodic(field, domain)
    v = sample(field, dom, t)
    return GridVectorField(dom, [t], leray_project_array(v, dom)[None])


@dataclass
class FieldNorms:
    sup_norm: float
    grad_sup_norm: float
    lq_norms: dict = dc_field(default_factory=dict)
    grad_lq_norms: dict = dc_field(default_factory=dict)
    lipschitz_est: float = 0.0
    holder_seminorm: float = 0.0
    holder_alpha: float = 0.5

    def lq_norm(self, q):
        return self.lq_norms[q]


def lq_norm(values, domain, q, normalized=False):
    """Riemann-sum L^q norm of grid samples (pointwise Euclidean/Frobenius magnitude).

    ``values`` has spatial axes (n, n, n) followed by component axes.
    With ``normalized`` the sum is divided by the cube volume.
    """
    v = np.asarray(values, dtype=float)
    mag = np.sqrt(np.sum(v.reshape(v.shape[:3] + (-1,)) ** 2, axis=-1))
    w = 1.0 / mag.size if normalized else domain.cell_volume
    if math.isinf(q):
        return float(mag.max())
    return float((np.sum(mag**q) * w) ** (1.0 / q))


def _neighbor_quotients(v, h, alpha):
    lip = 0.0
    hol = 0.0
    for a in range(3):
        d = np.roll(v, -1, axis=a) - v
        mag = np.sqrt(np.sum(d.reshape(d.shape[:3] + (-1,)) ** 2, axis=-1)).max()
        lip = max(lip, mag / h)
        hol = max(hol, mag / h**alpha)
    return float(lip), float(hol)


def norms(field, t, q_list=(2.0,), domain=None, alpha=0.5):
    """Sup, L^q, gradient and Lipschitz/Holder diagnostics over the grid."""
    dom = _require_periodic(field, domain)
    v = sample(field, dom, t)
    if v.ndim == 3:
        v = v[..., None]
    g = sample_gradient(field, dom, t)
    mag = np.sqrt(np.sum(v**2, axis=-1))
    gmag = np.sqrt(np.sum(g.reshape(g.shape[:3] + (-1,)) ** 2, axis=-1))
    lip, hol = _neighbor_quotients(v, dom.h, alpha)
    return FieldNorms(
        sup_norm=float(mag.max()),
        grad_sup_norm=float(gmag.max()),
        lq_norms={q: lq_norm(v, dom, q) for q in q_list},
        grad_lq_norms={q: lq_norm(g, dom, q) for q in q_list},
        lipschitz_est=lip,
        holder_seminorm=hol,
        holder_alpha=alpha,
    )


# --------------------------------------------------------------------------
# serialization

_MAGIC = b"SNSF"
_HEADER = struct.Struct("<4sqdqq")


def to_binary(field):
    """Flat little-endian layout.

    Header: magic ``SNSF``, int64 grid_n, float64 side, int64 number of time
    nodes, int64 components; then the time grid (float64) and the samples as
    row-major float64 in (time, ix, iy, iz, component) order.
    """
    d = field.domain
    comp = 1 if isinstance(field, ScalarField) else 3
    buf = io.BytesIO()
    buf.write(_HEADER.pack(_MAGIC, d.grid_n, d.side, field.time_grid.size, comp))
    buf.write(field.time_grid.astype("<f8").tobytes())
    buf.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return buf.getvalue()


def from_binary(data):
    magic, n, side, nt, comp = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise FieldDataError("not a field snapshot (bad magic)")
    off = _HEADER.size
    tg = np.frombuffer(data, dtype="<f8", count=nt, offset=off)
    off += 8 * nt
    shape = (nt, n, n, n) + (() if comp == 1 else (comp,))
    count = int(np.prod(shape))
    if len(data) - off != 8 * count:
        raise FieldDataError("truncated field snapshot")
    vals = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
    dom = PeriodicCube(side=side, grid_n=n)
    cls = GridScalarField if comp == 1 else GridVectorField
    return cls(dom, tg.copy(), vals.copy())


def save_binary(field, path):
    with open(path, "wb") as fh:
        fh.write(to_binary(field))


def load_binary(path):
    with open(path, "rb") as fh:
        return from_binary(fh.read())


def to_csv(field):
    """CSV with columns t,ix,iy,iz,ux,uy,uz (or t,ix,iy,iz,p for scalars)."""
    scalar = isinstance(field, ScalarField)
    lines = ["t,ix,iy,iz,p" if scalar else "t,ix,iy,iz,ux,uy,uz"]
    n = field.domain.grid_n
    for j, t in enumerate(field.time_grid):
        v = field.values[j]
        for ix in range(n):
            for iy in range(n):
                for iz in range(n):
                    vals = (v[ix, iy, iz],) if scalar else tuple(v[ix, iy, iz])
                    lines.append(",".join([repr(float(t)), str(ix), str(iy), str(iz)] + [repr(float(a)) for a in vals]))
    return "\n".join(lines) + "\n"


def from_csv(text, side=TWO_PI):
    rows = [r for r in text.strip().splitlines() if r]
    head = rows[0].split(",")
    scalar = len(head) == 5
    data = np.array([[float(c) for c in r.split(",")] for r in rows[1:]])
    times = np.unique(data[:, 0])
    n = int(data[:, 1].max()) + 1
    comp = 1 if scalar else 3
    vals = np.zeros((times.size, n, n, n, comp))
    jt = np.searchsorted(times, data[:, 0])
    idx = data[:, 1:4].astype(int)
    vals[jt, idx[:, 0], idx[:, 1], idx[:, 2]] = data[:, 4:]
    dom = PeriodicCube(side=side, grid_n=n)
    if scalar:
        return GridScalarField(dom, times, vals[..., 0])
    return GridVectorField(dom, times, vals)
