"""Acceptance suite shared by ``stochns validate`` and the test-suite.

Each criterion function returns a CriterionResult.  The expensive Beltrami
Picard runs are computed once per process and shared by the criteria that
inspect them.
"""

from __future__ import annotations

import functools
import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import apriori as AP
from . import fields as F
from . import flows as FL
from . import parabolic as PB
from . import picard as PC
from . import poisson as PS


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    runtime: float
    metrics: dict = field(default_factory=dict)

    def line(self):
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"

    def as_dict(self):
        return {"number": self.number, "name": self.name, "passed": self.passed, "detail": self.detail,
                "runtime": self.runtime, "metrics": self.metrics}


def _timed(number, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(seed=0):
            t0 = time.perf_counter()
            passed, detail, metrics = fn(seed)
            return CriterionResult(number, name, bool(passed), detail, time.perf_counter() - t0, metrics)

        wrapper.number = number
        return wrapper

    return deco


# --------------------------------------------------------------------------
# shared settings for the Navier-Stokes criteria

BELTRAMI_SIGMA = 1.0  # nu = sigma^2 / 2 = 0.5
BELTRAMI_T = 0.1
CROSS_T = 0.05


def beltrami_config(seed=0, backend=PC.PAPER, t_final=BELTRAMI_T):
    """Acceptance-run configuration: 4096 paths on a 16^3 grid, nodes every 0.05, dt = 0.0125."""
    return PC.PicardConfig(
        time_grid_n=int(round(t_final / CROSS_T)) + 1, grid_n=16, n_paths=4096, dt=0.0125, tol=5e-2, k_max=8,
        inner_tol=1e-3, inner_max=20, seed=seed, backend=backend,
    )


def beltrami_problem(t_final=BELTRAMI_T):
    return PC.NSProblem(u0=F.Beltrami(1.0, 1.0, 1.0, 0.0), sigma=BELTRAMI_SIGMA, t_final=t_final,
                        domain=F.PeriodicCube(grid_n=16))


@functools.lru_cache(maxsize=4)
def beltrami_run(seed=0, backend=PC.PAPER, t_final=BELTRAMI_T):
    prob = beltrami_problem(t_final)
    cfg = beltrami_config(seed, backend, t_final)
    t0 = time.perf_counter()
    state, converged, hist = PC.picard_run(prob, cfg)
    return prob, cfg, state, converged, hist, time.perf_counter() - t0


def weak_test_fields():
    """Five divergence-free trigonometric test fields."""
    return [
        F.Beltrami(1.0, 0.0, 0.0, 0.0),
        F.Beltrami(0.0, 1.0, 0.0, 0.0),
        F.Beltrami(0.0, 0.0, 1.0, 0.0),
        F.Beltrami(1.0, -1.0, 0.5, 0.0),
        F.TaylorGreen(0.0),
    ]


def _points(seed, n, low=0.0, high=2 * math.pi, label=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xACC, label])).uniform(low, high, (n, 3))


# --------------------------------------------------------------------------
# criteria


@_timed(1, "Poisson oracle equivalence")
def criterion_1(seed=0):
    dom = F.PeriodicCube()
    gam = F.FunctionScalar(lambda t, x: np.cos(x[..., 0]))
    pts = _points(seed, 20, label=1)
    cfg = PS.PoissonConfig(n_paths=8192, dt_bm=1e-3, t_max=20.0, seed=seed)
    t0 = time.perf_counter()
    res = PS.pressure_mc(gam, 0.0, pts, cfg, dom)
    wall = time.perf_counter() - t0
    err = np.abs(res.value - np.cos(pts[:, 0]))
    tol = 3 * res.std_err + 2 * cfg.dt_bm
    ok = bool(np.all(err <= tol)) and wall < 30.0
    return ok, f"max err {err.max():.3e}, worst err/tol {np.max(err / tol):.2f}, runtime {wall:.1f}s (< 30s)", {
        "max_error": float(err.max()), "max_ratio": float(np.max(err / tol)), "runtime": wall}


@_timed(2, "Calderon-Zygmund identity")
def criterion_2(seed=0):
    dom = F.PeriodicCube(grid_n=16)
    rs = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC2]))
    n = dom.grid_n
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(10):
        # random zero-mean band-limited data: modes with |m_i| <= 3, Hermitian symmetric by construction
        coef = np.zeros((n, n, n), dtype=complex)
        idx = rs.integers(-3, 4, size=(12, 3))
        for m in idx:
            if not m.any():
                continue
            c = rs.normal() + 1j * rs.normal()
            coef[tuple(m % n)] += c
            coef[tuple((-m) % n)] += np.conj(c)
        vals = np.real(np.fft.ifftn(coef)) * n**3
        g = F.GridScalarField(dom, [0.0], vals - vals.mean())
        lhs, rhs = PS.calderon_zygmund_check(g, dom)
        worst = max(worst, abs(lhs - rhs) / rhs)
    wall = time.perf_counter() - t0
    ok = worst <= 1e-8 and wall < 5.0
    return ok, f"max relative gap {worst:.2e} (<= 1e-8), runtime {wall:.2f}s (< 5s)", {"max_rel": worst, "runtime": wall}


@_timed(3, "BEL gradient consistency")
def criterion_3(seed=0):
    gam = F.GaussianBump(center=(0.0, 0.0, 0.0), width=0.5, amplitude=1.0)
    dom = F.WholeSpace(support_radius=2.0)
    pts = _points(seed, 10, -0.8, 0.8, label=3)
    cfg = PS.PoissonConfig(n_paths=1024, dt_bm=4e-3, t_max=5.0, seed=seed + 1)
    gr = PS.grad_pressure_mc(gam, 0.0, pts, cfg, dom)
    h = 0.05
    e = np.eye(3)
    shifted = np.concatenate([pts[:, None, :] + h * e[None], pts[:, None, :] - h * e[None]], axis=1)
    pr = PS.pressure_mc(gam, 0.0, shifted.reshape(-1, 3), cfg, dom, keep_samples=True)
    S = pr.samples.reshape(pr.samples.shape[0], len(pts), 6)
    fd = (S[:, :, :3] - S[:, :, 3:]) / (2 * h)  # common paths: per-sample difference quotients
    fd_mean = fd.mean(axis=0)
    fd_se = fd.std(axis=0, ddof=1) / math.sqrt(fd.shape[0])
    comb = np.sqrt(gr.std_err**2 + fd_se**2)
    ratio = np.abs(gr.value - fd_mean) / comb
    ok = bool(np.all(ratio <= 3.0))
    return ok, f"max |BEL - FD| / combined std_err = {ratio.max():.2f} (<= 3)", {"max_ratio": float(ratio.max())}


@_timed(4, "Flow reversal roundtrip rate")
def criterion_4(seed=0):
    u = F.Beltrami(1.0, 1.0, 1.0, 0.0)
    x = _points(seed, 5, label=4)
    t = 0.1
    dts = [4e-3, 2e-3, 1e-3]
    base = FL.FlowConfig(sigma=1.0, dt=dts[-1], n_paths=64, seed=seed + 4)
    fine = FL.brownian_increments(base, FL.n_steps_for(t, dts[-1]))
    errs = []
    for dt in dts:
        inc = FL.coarsen_increments(fine, int(round(dt / dts[-1])))
        cfg = FL.FlowConfig(sigma=1.0, dt=dt, n_paths=64, seed=seed + 4)
        ens = FL.simulate_backward_flow(u, t, x, cfg, increments=inc)
        errs.append(float(FL.roundtrip_error(ens, u).mean()))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    ok = abs(slope - 1.0) <= 0.3
    return ok, f"log-log slope {slope:.3f} (1.0 +- 0.3), errors {', '.join(f'{e:.2e}' for e in errs)}", {
        "slope": slope, "errors": errs}


@_timed(5, "Jacobian volume preservation")
def criterion_5(seed=0):
    u = F.Beltrami(1.0, 1.0, 1.0, 0.0)
    x = _points(seed, 5, label=5)
    t = 0.1
    out = []
    for dt in (1e-3, 5e-4):
        cfg = FL.FlowConfig(sigma=1.0, dt=dt, n_paths=256, seed=seed + 5)
        ens = FL.simulate_backward_flow(u, t, x, cfg)
        jac = FL.simulate_jacobian(u, ens, store="final")
        out.append(float(np.abs(jac.det()[:, :, -1] - 1.0).max()))
    ratio = out[1] / out[0]
    ok = out[0] <= 0.02 and 0.35 <= ratio <= 0.65
    return ok, f"max |det - 1| = {out[0]:.2e} at dt=1e-3 (<= 0.02), halving ratio {ratio:.3f} (0.5 +- 30%)", {
        "max_dev": out[0], "ratio": ratio}


@_timed(6, "Parabolic heat kernel and semigroup")
def criterion_6(seed=0):
    f0 = F.GaussianBump(center=(0.0, 0.0, 0.0), width=0.7, amplitude=1.0)
    prob = PB.ParabolicProblem(g=F.Zero(), sigma=1.0, f0=f0, t_final=0.3)
    pts = _points(seed, 20, -1.0, 1.0, label=6)
    m, se = PB.solve_parabolic(prob, pts, FL.FlowConfig(1.0, 0.01, 8192, seed=seed + 6, antithetic=True))
    exact = PB.heat_gaussian(1.0, 0.7, (0, 0, 0), 1.0, 0.3, pts)
    heat_ratio = float(np.max(np.abs(m - exact) / se))

    # two stages through a spectrally interpolated grid solution vs one stage
    dom = F.PeriodicCube(grid_n=16)
    g = F.Beltrami(1.0, 1.0, 1.0, 0.0)
    f1 = F.FunctionScalar(lambda t, x: np.cos(x[..., 0]) + 0.5 * np.sin(x[..., 1]))
    one = PB.ParabolicProblem(g=g, sigma=1.0, f0=f1, t_final=0.1)
    q = _points(seed, 20, label=61)
    m1, s1 = PB.solve_parabolic(one, q, FL.FlowConfig(1.0, 0.005, 8192, seed=seed + 61, antithetic=True))
    stage1 = PB.ParabolicProblem(g=g, sigma=1.0, f0=f1, t_final=0.05)
    mg, sg = PB.solve_parabolic(stage1, dom.nodes().reshape(-1, 3),
                                FL.FlowConfig(1.0, 0.005, 1024, seed=seed + 62, antithetic=True))
    mid = F.GridScalarField(dom, [0.05], mg.reshape((16,) * 3), interp="spectral")
    m2, s2 = PB.solve_parabolic(PB.staged_problem(one, 0.05, mid), q,
                                FL.FlowConfig(1.0, 0.005, 8192, seed=seed + 63, antithetic=True))
    comb = np.sqrt(s1**2 + s2**2 + sg.max() ** 2)
    semi_ratio = float(np.max(np.abs(m1 - m2) / comb))
    ok = heat_ratio <= 3.0 and semi_ratio <= 3.0
    return ok, f"heat max err/std_err {heat_ratio:.2f}, semigroup max gap/combined std_err {semi_ratio:.2f} (<= 3)", {
        "heat_ratio": heat_ratio, "semigroup_ratio": semi_ratio}


@_timed(7, "Navier-Stokes exact solution")
def criterion_7(seed=0):
    prob, cfg, state, converged, hist, wall = beltrami_run(seed)
    kappa = hist.kappa
    decreasing = bool(np.all(np.diff(kappa) < 0))
    exact = F.Beltrami(1.0, 1.0, 1.0, prob.nu)
    dom = state.domain
    ue = F.sample(exact, dom, prob.t_final)
    rel = float(np.abs(state.u[-1] - ue).max() / np.abs(ue).max())
    budget = 3 * float(state.u_se[-1].max())
    ok = converged and decreasing and rel <= 0.05
    detail = (f"converged={converged} at k={hist.converged_at}, kappa {', '.join(f'{k:.3g}' for k in kappa)}, "
              f"rel sup error {rel:.2e} (<= 5%), 3 std_err {budget:.1e}, O(dt + h^2) with dt={cfg.dt}, "
              f"h={dom.h:.3f}, runtime {wall:.0f}s")
    return ok, detail, {"rel_error": rel, "kappa": kappa.tolist(), "runtime": wall, "three_std_err": budget}


@_timed(8, "Weak-solution residual")
def criterion_8(seed=0):
    prob, cfg, state, converged, hist, wall = beltrami_run(seed)
    tests = weak_test_fields()
    rep = PC.verify_weak_solution(state, prob, tests, cfg)
    exact = PC.verify_weak_solution(F.Beltrami(1.0, 1.0, 1.0, prob.nu), prob, tests, cfg)
    ok = rep.within_budget and exact.max_residual <= 1e-6
    ratio = np.abs(rep.residuals) / rep.budgets
    detail = (f"Picard residual/budget max {ratio.max():.2f} (<= 1) over {len(tests)} fields, "
              f"exact-field residual {exact.max_residual:.1e} (<= 1e-6)")
    return ok, detail, {"residuals": rep.residuals.tolist(), "budgets": rep.budgets.tolist(),
                        "exact_residual": exact.max_residual}


def scheme_bias(prob, cfg, t):
    """Size of the O(dt) difference between two first-order schemes at time t.

    Each Euler-Maruyama representation carries a weak error of order
    dt * t * |u| |grad u|; both backends contribute one such term.
    """
    dom = F.PeriodicCube(grid_n=cfg.grid_n)
    u = F.sample(prob.u0, dom, 0.0)
    g = F.sample_gradient(prob.u0, dom, 0.0)
    U = float(np.sqrt(np.sum(u * u, axis=-1)).max())
    G = float(np.sqrt(np.sum(g * g, axis=(-2, -1))).max())
    return 2.0 * cfg.dt * t * U * G


@_timed(9, "Backend cross-validation")
def criterion_9(seed=0):
    prob, cfg, state, *_ = beltrami_run(seed)
    prob_ci, cfg_ci, state_ci, conv_ci, hist_ci, _ = beltrami_run(seed, PC.CI, CROSS_T)
    j = state.node(CROSS_T)
    jc = state_ci.node(CROSS_T)
    pts = _points(seed, 20, label=9)
    dom = state.domain
    up = F.trilinear(state.u[j], dom.h, pts)
    sp = F.trilinear(state.u_se[j], dom.h, pts)
    uc = F.trilinear(state_ci.u[jc], dom.h, pts)
    sc = F.trilinear(state_ci.u_se[jc], dom.h, pts)
    bias = scheme_bias(prob, cfg, CROSS_T)
    tol = 3 * np.sqrt(sp**2 + sc**2) + bias
    gap = np.abs(up - uc)
    ok = bool(np.all(gap <= tol)) and conv_ci
    return ok, (f"max |paper - CI| {gap.max():.2e}, worst gap/tol {np.max(gap / tol):.2f} "
                f"(scheme bias {bias:.1e}), CI converged={conv_ci}"), {
        "max_gap": float(gap.max()), "max_ratio": float(np.max(gap / tol)), "bias": bias}


@_timed(10, "A-priori horizon")
def criterion_10(seed=0):
    riccati = []
    for K in (0.5, 1.0, 2.0):
        T1 = AP.existence_horizon(AP.AprioriParams(K, 0.0, 0.0, 0.0), 1e-3)
        riccati.append(abs(T1 - 1.0 / K))
    ds_sweep = 2e-3
    values = (0.5, 1.0, 2.0)
    grid = {}
    for K in values:
        for b in (0.0, 0.5, 1.0):
            for c in (0.0, 1.0, 2.0):
                for c1 in (0.0, 1.0, 2.0):
                    grid[(K, b, c, c1)] = AP.existence_horizon(AP.AprioriParams(K, b, c, c1), ds_sweep)
    axes = [values, (0.0, 0.5, 1.0), (0.0, 1.0, 2.0), (0.0, 1.0, 2.0)]
    # horizons are resolved to the bisection tolerance plus one step of the solver
    slack = AP.BISECTION_TOL + ds_sweep
    violations = 0
    for key, T in grid.items():
        for ax in range(4):
            i = axes[ax].index(key[ax])
            if i + 1 < 3:
                bigger = list(key)
                bigger[ax] = axes[ax][i + 1]
                if grid[tuple(bigger)] > T + slack:
                    violations += 1
    p = AP.AprioriParams(1.0, 1.0, 1.0, 1.0)
    ds = 1e-3
    halving = abs(AP.existence_horizon(p, ds) - AP.existence_horizon(p, ds / 2))
    ok = max(riccati) <= 1e-2 and violations == 0 and halving <= 4 * ds
    return ok, (f"Riccati max |T1 - 1/K| {max(riccati):.1e} (<= 1e-2), monotonicity violations {violations}/81 cases, "
                f"step-halving change {halving:.1e} (<= {4 * ds:.0e})"), {
        "riccati": riccati, "violations": violations, "halving": halving}


_DETERMINISM_CONFIGS = {
    "poisson": "n_points = 6\nn_paths = 512\nt_max = 2.0\ndt_bm = 0.01\n",
    "parabolic": "drift = beltrami\nn_points = 6\nn_paths = 512\nt_final = 0.05\ndt = 0.01\n",
    "solve": ("grid_n = 8\nn_paths = 128\nt_final = 0.025\ntime_grid_n = 2\ndt = 0.0125\ntol = 0.5\nk_max = 2\n"),
}


@_timed(11, "Determinism across thread counts")
def criterion_11(seed=0):
    mismatched = []
    compared = 0
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for sub, text in _DETERMINISM_CONFIGS.items():
            cfg_path = tmp / f"{sub}.cfg"
            cfg_path.write_text(text)
            outs = []
            for threads in (1, 2):
                out = tmp / f"{sub}-{threads}"
                env = dict(os.environ, NUMBA_NUM_THREADS="2")
                proc = subprocess.run(
                    [sys.executable, "-m", "stochns.cli", sub, "--config", str(cfg_path), "--seed", str(seed + 11),
                     "--threads", str(threads), "--out", str(out)],
                    env=env, capture_output=True, text=True,
                )
                if proc.returncode not in (0, 2):
                    return False, f"{sub} run failed: {proc.stderr.strip()[-300:]}", {}
                outs.append(out)
            for csv in sorted(outs[0].glob("*.csv")):
                compared += 1
                other = outs[1] / csv.name
                if not other.exists() or other.read_bytes() != csv.read_bytes():
                    mismatched.append(f"{sub}/{csv.name}")
    ok = not mismatched and compared > 0
    return ok, f"{compared} CSV files compared across 1 and 2 threads, mismatches: {mismatched or 'none'}", {
        "compared": compared, "mismatched": mismatched}


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7, criterion_8,
            criterion_9, criterion_10, criterion_11]


def run_all(ids=None, seed=0):
    chosen = [c for c in CRITERIA if ids is None or c.number in ids]
    return [c(seed) for c in chosen]


if __name__ == "__main__":
    for r in run_all():
        print(r.line(), flush=True)
