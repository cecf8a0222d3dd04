"""Compiled inner loops (numba).

Parallel loops only split work over evaluation points and every point reduces
its own paths in a fixed order, so results do not depend on the thread count.
"""

import numba
import numpy as np
from numba import njit, prange

# the portable work-queue layer avoids probing for an optional TBB install
if numba.config.THREADING_LAYER == "default":
    numba.config.THREADING_LAYER = "workqueue"


@njit(cache=True)
def fourier_path_sums(m, kscale, Z, dt, n_tail, want_grad, antithetic):
    """Brownian time sums of Fourier phases along each path.

    ``Z`` holds standard normals of shape (n_base, n, 3).  With ``antithetic``
    every base path is paired with its negation, stored at index
    ``p + n_base``; the partner's phase is the complex conjugate.

    For each path p and mode j, with B_s the Brownian position after s steps
    (B_0 = 0) and tau_s = s * dt:

      S[p, j]  = sum_{s=0}^{n-1} dt * exp(i k_j . B_s)
      St[p, j] = same sum restricted to the last ``n_tail`` steps
      T[p, j]  = sum_{s=1}^{n-1} (dt / tau_s) * exp(i k_j . B_s) * B_s
      Tt[p, j] = T restricted to the last ``n_tail`` steps
    """
    n_base, n, _ = Z.shape
    n_paths = 2 * n_base if antithetic else n_base
    M = m.shape[0]
    S = np.zeros((n_paths, M), dtype=np.complex128)
    St = np.zeros((n_paths, M), dtype=np.complex128)
    gshape = (n_paths, M, 3) if want_grad else (1, 1, 3)
    T = np.zeros(gshape, dtype=np.complex128)
    Tt = np.zeros(gshape, dtype=np.complex128)
    mm = np.zeros(3, dtype=np.int64)
    for j in range(M):
        for a in range(3):
            v = abs(m[j, a])
            if v > mm[a]:
                mm[a] = v
    width = 2 * mm.max() + 1
    tab = np.empty((3, width), dtype=np.complex128)
    sq = np.sqrt(dt)
    tail_start = n - n_tail
    for p in range(n_base):
        q = p + n_base
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        for s in range(n):
            for a in range(3):
                ma = mm[a]
                tab[a, ma] = 1.0
                if ma > 0:
                    ba = b0 if a == 0 else (b1 if a == 1 else b2)
                    base = np.exp(1j * kscale * ba)
                    for jj in range(1, ma + 1):
                        tab[a, ma + jj] = tab[a, ma + jj - 1] * base
                        tab[a, ma - jj] = np.conj(tab[a, ma + jj])
            inv_s = 1.0 / s if s > 0 else 0.0
            in_tail = s >= tail_start
            for j in range(M):
                ph = tab[0, mm[0] + m[j, 0]] * tab[1, mm[1] + m[j, 1]] * tab[2, mm[2] + m[j, 2]]
                phc = np.conj(ph)
                S[p, j] += dt * ph
                if antithetic:
                    S[q, j] += dt * phc
                if in_tail:
                    St[p, j] += dt * ph
                    if antithetic:
                        St[q, j] += dt * phc
                if want_grad and s > 0:
                    w = inv_s * ph
                    T[p, j, 0] += w * b0
                    T[p, j, 1] += w * b1
                    T[p, j, 2] += w * b2
                    if in_tail:
                        Tt[p, j, 0] += w * b0
                        Tt[p, j, 1] += w * b1
                        Tt[p, j, 2] += w * b2
                    if antithetic:
                        wc = -inv_s * phc
                        T[q, j, 0] += wc * b0
                        T[q, j, 1] += wc * b1
                        T[q, j, 2] += wc * b2
                        if in_tail:
                            Tt[q, j, 0] += wc * b0
                            Tt[q, j, 1] += wc * b1
                            Tt[q, j, 2] += wc * b2
            b0 += sq * Z[p, s, 0]
            b1 += sq * Z[p, s, 1]
            b2 += sq * Z[p, s, 2]
    return S, St, T, Tt


@njit(cache=True)
def fourier_multiplier_sums(n_grid, kscale, Z, dt, antithetic):
    """Path-summed phase multipliers for every grid wavenumber.

    Returns Ssum[a, b, c] = sum_p sum_s dt e^{i k.B_s} and
    Tsum[a, b, c, :] = sum_p sum_{s>=1} (1/s) e^{i k.B_s} B_s, with k indexed
    in FFT order.  Antithetic partners (-B) are folded in through conjugation.
    """
    n_base, n, _ = Z.shape
    half = n_grid // 2
    idx = np.empty(n_grid, dtype=np.int64)
    for a in range(n_grid):
        idx[a] = a if a < (n_grid + 1) // 2 else a - n_grid
    Ssum = np.zeros((n_grid, n_grid, n_grid), dtype=np.complex128)
    Tsum = np.zeros((n_grid, n_grid, n_grid, 3), dtype=np.complex128)
    tab = np.empty((3, 2 * half + 1), dtype=np.complex128)
    sq = np.sqrt(dt)
    for p in range(n_base):
        b = np.zeros(3)
        for s in range(n):
            for ax in range(3):
                base = np.exp(1j * kscale * b[ax])
                tab[ax, half] = 1.0
                for jj in range(1, half + 1):
                    tab[ax, half + jj] = tab[ax, half + jj - 1] * base
                    tab[ax, half - jj] = np.conj(tab[ax, half + jj])
            inv_s = 1.0 / s if s > 0 else 0.0
            for a in range(n_grid):
                pa = tab[0, half + idx[a]]
                for c in range(n_grid):
                    pac = pa * tab[1, half + idx[c]]
                    for d in range(n_grid):
                        ph = pac * tab[2, half + idx[d]]
                        if antithetic:
                            # e^{ik.B} + e^{-ik.B} and (e^{ik.B} - e^{-ik.B}) B
                            Ssum[a, c, d] += dt * 2.0 * ph.real
                            if s > 0:
                                w = inv_s * 2j * ph.imag
                                Tsum[a, c, d, 0] += w * b[0]
                                Tsum[a, c, d, 1] += w * b[1]
                                Tsum[a, c, d, 2] += w * b[2]
                        else:
                            Ssum[a, c, d] += dt * ph
                            if s > 0:
                                w = inv_s * ph
                                Tsum[a, c, d, 0] += w * b[0]
                                Tsum[a, c, d, 1] += w * b[1]
                                Tsum[a, c, d, 2] += w * b[2]
            b[0] += sq * Z[p, s, 0]
            b[1] += sq * Z[p, s, 1]
            b[2] += sq * Z[p, s, 2]
    return Ssum, Tsum


# --------------------------------------------------------------------------
# backward-flow estimates for the Picard driver

# table channels: drift u (0:3), grad u (3:12, row i = component), grad p (12:15)
N_CHANNELS = 15

MODE_PAPER = 0
MODE_PAPER_NOGRAD = 1
MODE_CI = 2


@njit(cache=True, inline="always")
def _lookup(flat, base, x0, x1, x2, invh, n, nc, out):
    """Periodic trilinear interpolation of all channels of one table slice."""
    s0 = x0 * invh
    s1 = x1 * invh
    s2 = x2 * invh
    f0 = np.floor(s0)
    f1 = np.floor(s1)
    f2 = np.floor(s2)
    w0 = s0 - f0
    w1 = s1 - f1
    w2 = s2 - f2
    i0 = np.int64(f0) % n
    i1 = np.int64(f1) % n
    i2 = np.int64(f2) % n
    j0 = i0 + 1 if i0 + 1 < n else 0
    j1 = i1 + 1 if i1 + 1 < n else 0
    j2 = i2 + 1 if i2 + 1 < n else 0
    sx = n * n * nc
    sy = n * nc
    a0 = base + i0 * sx
    a1 = base + j0 * sx
    b0 = i1 * sy
    b1 = j1 * sy
    c0 = i2 * nc
    c1 = j2 * nc
    v0 = 1.0 - w0
    v1 = 1.0 - w1
    v2 = 1.0 - w2
    o000 = a0 + b0 + c0
    o001 = a0 + b0 + c1
    o010 = a0 + b1 + c0
    o011 = a0 + b1 + c1
    o100 = a1 + b0 + c0
    o101 = a1 + b0 + c1
    o110 = a1 + b1 + c0
    o111 = a1 + b1 + c1
    k000 = v0 * v1 * v2
    k001 = v0 * v1 * w2
    k010 = v0 * w1 * v2
    k011 = v0 * w1 * w2
    k100 = w0 * v1 * v2
    k101 = w0 * v1 * w2
    k110 = w0 * w1 * v2
    k111 = w0 * w1 * w2
    for c in range(nc):
        out[c] = (
            k000 * flat[o000 + c]
            + k001 * flat[o001 + c]
            + k010 * flat[o010 + c]
            + k011 * flat[o011 + c]
            + k100 * flat[o100 + c]
            + k101 * flat[o101 + c]
            + k110 * flat[o110 + c]
            + k111 * flat[o111 + c]
        )


@njit(cache=True)
def _point_paths(pt, flat, n, nc, n_steps, invh, dt, sigma, Z, antithetic, m, coef, kscale, mode, vals, st, u_out, g_out):
    """All paths from one start point, advanced step by step in lock-step.

    Iterating over paths inside the step loop keeps the table slice of that
    step hot in cache and lets independent lookups overlap.  ``st`` is
    scratch state of shape (n_paths, 27): position (0:3), Jacobian eta
    row-major (3:12), BEL weight W (12:15), pressure sum (15:18) and the
    weighted pressure sum (18:27).  Path p < n_base uses +Z[p], path
    p + n_base uses -Z[p].  Per-path samples are written to u_out / g_out.
    """
    n_base = Z.shape[0]
    n_paths = st.shape[0]
    sq = np.sqrt(dt)
    slab = n * n * n * nc
    grad = mode == MODE_PAPER
    track_eta = mode != MODE_PAPER_NOGRAD
    for q in range(n_paths):
        for c in range(27):
            st[q, c] = 0.0
        st[q, 0] = pt[0]
        st[q, 1] = pt[1]
        st[q, 2] = pt[2]
        st[q, 3] = 1.0
        st[q, 7] = 1.0
        st[q, 11] = 1.0
    for s in range(n_steps):
        base = (n_steps - s) * slab
        c_bel = 1.0 / (sigma * s) if (grad and s > 0) else 0.0
        for q in range(n_paths):
            x0 = st[q, 0]
            x1 = st[q, 1]
            x2 = st[q, 2]
            _lookup(flat, base, x0, x1, x2, invh, n, nc, vals)
            p0 = vals[12]
            p1 = vals[13]
            p2 = vals[14]
            st[q, 15] += dt * p0
            st[q, 16] += dt * p1
            st[q, 17] += dt * p2
            W0 = st[q, 12]
            W1 = st[q, 13]
            W2 = st[q, 14]
            if c_bel != 0.0:
                st[q, 18] += c_bel * p0 * W0
                st[q, 19] += c_bel * p0 * W1
                st[q, 20] += c_bel * p0 * W2
                st[q, 21] += c_bel * p1 * W0
                st[q, 22] += c_bel * p1 * W1
                st[q, 23] += c_bel * p1 * W2
                st[q, 24] += c_bel * p2 * W0
                st[q, 25] += c_bel * p2 * W1
                st[q, 26] += c_bel * p2 * W2
            if q < n_base:
                zp = q
                z = sq
            else:
                zp = q - n_base
                z = -sq
            d0 = z * Z[zp, s, 0]
            d1 = z * Z[zp, s, 1]
            d2 = z * Z[zp, s, 2]
            if track_eta:
                e00 = st[q, 3]
                e01 = st[q, 4]
                e02 = st[q, 5]
                e10 = st[q, 6]
                e11 = st[q, 7]
                e12 = st[q, 8]
                e20 = st[q, 9]
                e21 = st[q, 10]
                e22 = st[q, 11]
                if grad:
                    st[q, 12] = W0 + e00 * d0 + e10 * d1 + e20 * d2
                    st[q, 13] = W1 + e01 * d0 + e11 * d1 + e21 * d2
                    st[q, 14] = W2 + e02 * d0 + e12 * d1 + e22 * d2
                a00 = dt * vals[3]
                a01 = dt * vals[4]
                a02 = dt * vals[5]
                a10 = dt * vals[6]
                a11 = dt * vals[7]
                a12 = dt * vals[8]
                a20 = dt * vals[9]
                a21 = dt * vals[10]
                a22 = dt * vals[11]
                st[q, 3] = e00 - (a00 * e00 + a01 * e10 + a02 * e20)
                st[q, 4] = e01 - (a00 * e01 + a01 * e11 + a02 * e21)
                st[q, 5] = e02 - (a00 * e02 + a01 * e12 + a02 * e22)
                st[q, 6] = e10 - (a10 * e00 + a11 * e10 + a12 * e20)
                st[q, 7] = e11 - (a10 * e01 + a11 * e11 + a12 * e21)
                st[q, 8] = e12 - (a10 * e02 + a11 * e12 + a12 * e22)
                st[q, 9] = e20 - (a20 * e00 + a21 * e10 + a22 * e20)
                st[q, 10] = e21 - (a20 * e01 + a21 * e11 + a22 * e21)
                st[q, 11] = e22 - (a20 * e02 + a21 * e12 + a22 * e22)
            st[q, 0] = x0 - dt * vals[0] + sigma * d0
            st[q, 1] = x1 - dt * vals[1] + sigma * d1
            st[q, 2] = x2 - dt * vals[2] + sigma * d2
    # initial velocity and its gradient from Fourier modes at the path ends
    u0 = np.empty(3)
    g0 = np.empty((3, 3))
    for q in range(n_paths):
        x0 = st[q, 0]
        x1 = st[q, 1]
        x2 = st[q, 2]
        u0[:] = 0.0
        g0[:] = 0.0
        for j in range(m.shape[0]):
            k0 = kscale * m[j, 0]
            k1 = kscale * m[j, 1]
            k2 = kscale * m[j, 2]
            e = np.exp(1j * (k0 * x0 + k1 * x1 + k2 * x2))
            for i in range(3):
                ce = coef[j, i] * e
                u0[i] += ce.real
                # d/dx_k Re(c e^{ik.x}) = -k_k Im(c e^{ik.x})
                g0[i, 0] -= k0 * ce.imag
                g0[i, 1] -= k1 * ce.imag
                g0[i, 2] -= k2 * ce.imag
        if mode == MODE_CI:
            for k in range(3):
                u_out[q, k] = st[q, 3 + k] * u0[0] + st[q, 6 + k] * u0[1] + st[q, 9 + k] * u0[2]
            continue
        for i in range(3):
            u_out[q, i] = u0[i] - st[q, 15 + i]
        if grad:
            for i in range(3):
                for k in range(3):
                    g_out[q, i, k] = (
                        g0[i, 0] * st[q, 3 + k] + g0[i, 1] * st[q, 6 + k] + g0[i, 2] * st[q, 9 + k]
                    ) - st[q, 18 + 3 * i + k]


@njit(cache=True, parallel=True)
def backward_path_estimates(pts, tab, n_steps, invh, dt, sigma, Z, antithetic, m, coef, kscale, mode):
    """Per-point sums over independent samples of the velocity and gradient estimators.

    Paths are driven by the shared standard normals ``Z`` (n_base, n_steps, 3);
    with ``antithetic`` each base path is paired with its negation and the pair
    average counts as one sample.  Table slice ``it`` holds fields at time
    ``it * dt``.  Returns (u_sum, u_sumsq, g_sum, g_sumsq) over n_base samples.
    """
    P = pts.shape[0]
    n_base = Z.shape[0]
    n_paths = 2 * n_base if antithetic else n_base
    n = tab.shape[1]
    nc = tab.shape[4]
    flat = tab.reshape(-1)
    u_sum = np.zeros((P, 3))
    u_sq = np.zeros((P, 3))
    g_sum = np.zeros((P, 3, 3))
    g_sq = np.zeros((P, 3, 3))
    for ip in prange(P):
        vals = np.empty(nc)
        st = np.empty((n_paths, 27))
        uo = np.zeros((n_paths, 3))
        go = np.zeros((n_paths, 3, 3))
        _point_paths(pts[ip], flat, n, nc, n_steps, invh, dt, sigma, Z, antithetic, m, coef, kscale, mode, vals, st, uo, go)
        for p in range(n_base):
            for i in range(3):
                a = uo[p, i]
                if antithetic:
                    a = 0.5 * (a + uo[p + n_base, i])
                u_sum[ip, i] += a
                u_sq[ip, i] += a * a
                for k in range(3):
                    b = go[p, i, k]
                    if antithetic:
                        b = 0.5 * (b + go[p + n_base, i, k])
                    g_sum[ip, i, k] += b
                    g_sq[ip, i, k] += b * b
    return u_sum, u_sq, g_sum, g_sq
