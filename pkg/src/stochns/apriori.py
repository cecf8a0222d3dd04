"""A-priori bounds for the velocity gradient and the existence horizon.

The bound functions satisfy, for s in [0, t],

    d alpha / ds = -alpha^2 - C_qm alpha beta,       alpha(t) = K01
    d beta  / ds = -alpha beta - C1_qm alpha beta,   beta(t)  = beta0

The right-hand sides are non-positive, so both functions grow as s decreases
from the terminal time.  The horizon T1 is the largest t for which the
backward solution stays finite on [0, t].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

BLOWUP_LEVEL = 1e12
# a step is accepted when one step and two half steps agree to this relative level
DOUBLING_RTOL = 0.05
BISECTION_TOL = 1e-3


@dataclass(frozen=True)
class AprioriParams:
    K01: float
    beta0: float
    C_qm: float = 1.0
    C1_qm: float = 1.0

    def __post_init__(self):
        for name in ("K01", "beta0", "C_qm", "C1_qm"):
            v = getattr(self, name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class BoundSolution:
    """Backward solution on an ascending s grid.

    ``T1`` is the distance from the terminal time to the detected blow-up, or
    ``math.inf`` when the solution stayed bounded on all of [0, t].
    """

    s_grid: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    T1: float = math.inf
    t: float = 0.0

    @property
    def bounded(self):
        return math.isinf(self.T1)

    def to_csv(self):
        lines = ["s,alpha,beta"]
        lines += [f"{s!r},{a!r},{b!r}" for s, a, b in zip(self.s_grid, self.alpha, self.beta)]
        return "\n".join(lines) + "\n"


def _rhs(a, b, p):
    # derivatives with respect to r = t - s (time run backward), hence the sign flip
    return a * a + p.C_qm * a * b, a * b + p.C1_qm * a * b


def _rk4(a, b, h, p):
    k1a, k1b = _rhs(a, b, p)
    k2a, k2b = _rhs(a + 0.5 * h * k1a, b + 0.5 * h * k1b, p)
    k3a, k3b = _rhs(a + 0.5 * h * k2a, b + 0.5 * h * k2b, p)
    k4a, k4b = _rhs(a + h * k3a, b + h * k3b, p)
    return (
        a + h * (k1a + 2 * k2a + 2 * k3a + k4a) / 6.0,
        b + h * (k1b + 2 * k2b + 2 * k3b + k4b) / 6.0,
    )


def _unresolved(full, half):
    for x, y in zip(full, half):
        if not (math.isfinite(x) and math.isfinite(y)):
            return True
        if abs(x - y) > DOUBLING_RTOL * max(1.0, abs(y)):
            return True
    return False


def solve_bound_odes(params: AprioriParams, t, ds) -> BoundSolution:
    """Classical RK4 from s = t down to s = 0 with a step-doubling blow-up check."""
    if not ds > 0:
        raise ValueError("ds must be positive")
    if t < 0:
        raise ValueError("t must be non-negative")
    a, b = float(params.K01), float(params.beta0)
    s = float(t)
    ss, aa, bb = [s], [a], [b]
    T1 = math.inf
    n = max(1, math.ceil(t / ds - 1e-9)) if t > 0 else 0
    h = t / n if n else 0.0
    for i in range(n):
        full = _rk4(a, b, h, params)
        mid = _rk4(a, b, 0.5 * h, params)
        half = _rk4(mid[0], mid[1], 0.5 * h, params)
        if _unresolved(full, half) or half[0] > BLOWUP_LEVEL or half[1] > BLOWUP_LEVEL:
            T1 = t - s
            break
        a, b = half
        s = t - (i + 1) * h
        if a < aa[-1] or b < bb[-1]:
            raise ArithmeticError("bound functions decreased backward in s; the right-hand side must be non-positive")
        ss.append(max(s, 0.0))
        aa.append(a)
        bb.append(b)
    ss.reverse()
    aa.reverse()
    bb.reverse()
    return BoundSolution(s_grid=ss, alpha=aa, beta=bb, T1=T1, t=float(t))


def existence_horizon(params: AprioriParams, ds, t_cap=1e4) -> float:
    """Largest t with a bounded backward solve, found by bisection to 1e-3.

    Returns ``math.inf`` when K01 = 0 (zero right-hand side) or when no blow-up
    occurs up to ``t_cap``.
    """
    if params.K01 == 0.0:
        return math.inf

    def bounded(t):
        return solve_bound_odes(params, t, ds).bounded

    lo, hi = 0.0, 1.0
    while bounded(hi):
        lo = hi
        hi *= 2.0
        if hi > t_cap:
            return math.inf
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if bounded(mid):
            lo = mid
        else:
            hi = mid
    return lo


def riccati_horizon(K01):
    """Closed form for C_qm = C1_qm = beta0 = 0: alpha(s) = 1 / (s - t + 1/K)."""
    return math.inf if K01 == 0 else 1.0 / K01
