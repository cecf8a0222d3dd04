"""Batch front end.

Usage::

    stochns SUBCOMMAND [--config PATH] [--seed N] [--threads N] [--out DIR]

Subcommands: solve, poisson, parabolic, apriori, validate, bench.  The config
file holds ``key = value`` lines; ``#`` starts a comment.  Every run writes
``manifest.json`` plus CSV tables into the output directory.

Exit codes: 0 success, 1 error, 2 Picard non-convergence, 3 validation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__

SUBCOMMANDS = ("solve", "poisson", "parabolic", "apriori", "validate", "bench")
THREADS_ENV = "STOCHNS_THREADS"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_VALIDATION = 3


class ConfigParseError(ValueError):
    """Config text violates the schema; the message names the line."""


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _vec3(text):
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected three numbers, got {text!r}")
    return tuple(parts)


def _choice(*options):
    def conv(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return conv


def _positive(conv):
    def check(text):
        v = conv(text)
        if not v > 0:
            raise ValueError(f"must be positive, got {v}")
        return v

    return check


def _nonneg(conv):
    def check(text):
        v = conv(text)
        if not v >= 0:
            raise ValueError(f"must be non-negative, got {v}")
        return v

    return check


# key -> (converter, default); defaults are the documented values
_COMMON = {
    "subcommand": (_choice(*SUBCOMMANDS), None),
    "seed": (int, 0),
}

_SCHEMA = {
    "solve": {
        "problem": (_choice("beltrami", "taylor_green", "constant", "zero"), "beltrami"),
        "A": (float, 1.0),
        "B": (float, 1.0),
        "C": (float, 1.0),
        "velocity": (_vec3, (1.0, 0.0, 0.0)),
        "sigma": (_nonneg(float), 1.0),
        "t_final": (_positive(float), 0.1),
        "side": (_positive(float), 2 * math.pi),
        "grid_n": (_positive(int), 16),
        "time_grid_n": (_positive(int), 8),
        "dt": (_positive(float), 1e-3),
        "n_paths": (_positive(int), 4096),
        "tol": (_positive(float), 5e-2),
        "k_max": (_positive(int), 10),
        "inner_tol": (_positive(float), 1e-3),
        "inner_max": (_positive(int), 20),
        "backend": (_choice("PaperPicard", "ConstantinIyer"), "PaperPicard"),
        "pressure_solver": (_choice("spectral", "mc"), "spectral"),
        "antithetic": (_bool, True),
        "q": (float, 1.2),
        "m": (float, 4.0),
        "stderr_const": (_positive(float), 1.0),
    },
    "poisson": {
        "gamma": (_choice("cos_x1", "gaussian"), "cos_x1"),
        "domain": (_choice("periodic", "whole"), "periodic"),
        "width": (_positive(float), 0.5),
        "amplitude": (float, 1.0),
        "n_points": (_positive(int), 20),
        "n_paths": (_positive(int), 8192),
        "dt_bm": (_positive(float), 1e-3),
        "t_max": (_positive(float), 20.0),
        "antithetic": (_bool, True),
        "gradient": (_bool, False),
    },
    "parabolic": {
        "drift": (_choice("zero", "beltrami"), "zero"),
        "sigma": (_nonneg(float), 1.0),
        "t_final": (_positive(float), 0.3),
        "width": (_positive(float), 0.7),
        "amplitude": (float, 1.0),
        "n_points": (_positive(int), 20),
        "n_paths": (_positive(int), 8192),
        "dt": (_positive(float), 0.01),
        "antithetic": (_bool, True),
    },
    "apriori": {
        "K01": (_nonneg(float), 2.0),
        "beta0": (_nonneg(float), 0.0),
        "C_qm": (_nonneg(float), 0.0),
        "C1_qm": (_nonneg(float), 0.0),
        "t": (_nonneg(float), None),
        "ds": (_positive(float), 1e-3),
    },
    "validate": {
        "criteria": (str, "all"),
    },
    "bench": {
        "n_paths": (_positive(int), 256),
        "grid_n": (_positive(int), 8),
        "dt": (_positive(float), 0.0125),
        "t_final": (_positive(float), 0.05),
        "time_grid_n": (_positive(int), 2),
        "sigma": (_nonneg(float), 1.0),
    },
}


@dataclass
class RunConfig:
    subcommand: str
    params: dict
    seed: int = 0
    threads: int | None = None
    out: str = "stochns_out"
    source_lines: dict = field(default_factory=dict)

    def echo(self):
        return {"subcommand": self.subcommand, "seed": self.seed, "threads": self.threads, "params": self.params}


def parse_config(text, subcommand=None) -> RunConfig:
    """Parse ``key = value`` text into a validated RunConfig with defaults filled."""
    raw = {}
    lines = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"line {ln}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigParseError(f"line {ln}: missing key")
        if key in raw:
            raise ConfigParseError(f"line {ln}: duplicate key {key!r} (first set on line {lines[key]})")
        raw[key] = value
        lines[key] = ln
    sub = subcommand
    if "subcommand" in raw:
        named = raw["subcommand"]
        if named not in SUBCOMMANDS:
            raise ConfigParseError(f"line {lines['subcommand']}: subcommand: unknown value {named!r}")
        if sub is not None and named != sub:
            raise ConfigParseError(f"line {lines['subcommand']}: config is for {named!r} but {sub!r} was requested")
        sub = named
    if sub is None:
        raise ConfigParseError("no subcommand given")
    schema = dict(_COMMON)
    schema.update(_SCHEMA[sub])
    params = {}
    for key, value in raw.items():
        if key not in schema:
            raise ConfigParseError(f"line {lines[key]}: unknown key {key!r} for subcommand {sub!r}")
        conv, _ = schema[key]
        try:
            params[key] = conv(value)
        except ValueError as exc:
            raise ConfigParseError(f"line {lines[key]}: {key}: {exc}") from None
    for key, (_, default) in _SCHEMA[sub].items():
        params.setdefault(key, default)
    seed = params.pop("seed", 0)
    params.pop("subcommand", None)
    cfg = RunConfig(subcommand=sub, params=params, seed=seed, source_lines=lines)
    _validate(cfg)
    return cfg


def _line(cfg, key):
    ln = cfg.source_lines.get(key)
    return f"line {ln}: " if ln else ""


def predicted_stderr(n_paths, c=1.0):
    """Velocity std_err predictor c / sqrt(n_paths) (c calibrated by ``bench``)."""
    return c / math.sqrt(n_paths)


def _validate(cfg: RunConfig):
    p = cfg.params
    if cfg.subcommand == "solve":
        se = predicted_stderr(p["n_paths"], p["stderr_const"])
        if p["tol"] <= 3.0 * se:
            raise ConfigParseError(
                f"{_line(cfg, 'tol')}tol: {p['tol']} is below 3x the predicted std_err {se:.4g} "
                f"for n_paths={p['n_paths']}"
            )
        if p["time_grid_n"] < 2:
            raise ConfigParseError(f"{_line(cfg, 'time_grid_n')}time_grid_n: must be at least 2")
        spacing = p["t_final"] / (p["time_grid_n"] - 1)
        ratio = spacing / p["dt"]
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigParseError(f"{_line(cfg, 'dt')}dt: {p['dt']} must divide the time-grid spacing {spacing}")
        if p["antithetic"] and p["n_paths"] % 2:
            raise ConfigParseError(f"{_line(cfg, 'n_paths')}n_paths: must be even with antithetic sampling")
        if not (1.0 < p["q"] < 1.5):
            raise ConfigParseError(f"{_line(cfg, 'q')}q: must lie in (1, 3/2)")
        if not p["m"] > 3.0:
            raise ConfigParseError(f"{_line(cfg, 'm')}m: must exceed 3")
    if cfg.subcommand in ("poisson", "parabolic") and p["antithetic"] and p["n_paths"] % 2:
        raise ConfigParseError(f"{_line(cfg, 'n_paths')}n_paths: must be even with antithetic sampling")
    if cfg.subcommand == "bench":
        spacing = p["t_final"] / (p["time_grid_n"] - 1) if p["time_grid_n"] > 1 else 0.0
        ratio = spacing / p["dt"] if spacing else 0.0
        if p["time_grid_n"] < 2 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigParseError(f"{_line(cfg, 'dt')}dt: must divide t_final / (time_grid_n - 1)")


# --------------------------------------------------------------------------
# output helpers


def _write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv(header, rows):
    out = [",".join(header)]
    for r in rows:
        out.append(",".join(repr(float(v)) if not isinstance(v, (str, bool, int)) else str(v) for v in r))
    return "\n".join(out) + "\n"


def _points(seed, n, low, high):
    import numpy as np

    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5054])).uniform(low, high, (n, 3))


# --------------------------------------------------------------------------
# subcommand drivers; each returns (exit_code, manifest_extra, files)


def _run_solve(cfg):
    from . import fields as F
    from . import picard as PC

    p = cfg.params
    dom = F.PeriodicCube(side=p["side"], grid_n=p["grid_n"])
    nu = 0.5 * p["sigma"] ** 2
    if p["problem"] == "beltrami":
        u0 = F.Beltrami(p["A"], p["B"], p["C"], 0.0)
        exact = F.Beltrami(p["A"], p["B"], p["C"], nu)
    elif p["problem"] == "taylor_green":
        u0 = F.TaylorGreen(0.0)
        exact = F.TaylorGreen(nu)
    elif p["problem"] == "constant":
        u0 = F.Constant(p["velocity"])
        exact = u0
    else:
        u0 = F.Zero()
        exact = u0
    prob = PC.NSProblem(u0=u0, sigma=p["sigma"], t_final=p["t_final"], domain=dom)
    pcfg = PC.PicardConfig(
        time_grid_n=p["time_grid_n"], grid_n=p["grid_n"], n_paths=p["n_paths"], dt=p["dt"], tol=p["tol"],
        k_max=p["k_max"], inner_tol=p["inner_tol"], inner_max=p["inner_max"], seed=cfg.seed, backend=p["backend"],
        antithetic=p["antithetic"], pressure_solver=p["pressure_solver"], q=p["q"], m=p["m"],
    )
    state, converged, hist = PC.picard_run(prob, pcfg)
    files = {}
    keys = ["k", "rho", "zeta", "m", "l", "kappa", "u_se_max", "grad_u_se_max", "inner_iterations"]
    files["deltas.csv"] = _csv(keys, [[d[k] for k in keys] for d in hist.deltas])
    files["norms.csv"] = _csv(["t", "K1", "beta"], zip(state.time_grid, state.K1, state.beta))
    files["velocity.csv"] = F.to_csv(state.velocity_field())
    files["pressure.csv"] = F.to_csv(state.pressure_field())
    import numpy as np

    nodes = dom.nodes()
    errs = []
    for j, t in enumerate(state.time_grid):
        ue = F.sample(exact, dom, t)
        scale = float(np.abs(ue).max()) or 1.0
        errs.append((t, float(np.abs(state.u[j] - ue).max() / scale), float(state.u_se[j].max())))
    files["exact_error.csv"] = _csv(["t", "rel_sup_error", "max_std_err"], errs)
    extra = {
        "converged": converged,
        "converged_at": hist.converged_at,
        "iterations": [dict(d) for d in hist.deltas],
        "norm_trajectories": {"t": list(map(float, state.time_grid)), "K1": list(map(float, state.K1)),
                              "beta": list(map(float, state.beta))},
        "error_budget": {
            "max_std_err": float(state.u_se.max()),
            "three_std_err": 3.0 * float(state.u_se.max()),
            "time_step_bias_order": p["dt"],
            "grid_bias_order": dom.h**2,
            "note": "bias terms are orders O(dt) and O(h^2), not computed constants",
        },
        "divergence_ratio": list(map(float, state.divergence_ratio())),
        "exact_solution_error": errs,
        "nodes": int(nodes.shape[0] ** 3),
    }
    return (EXIT_OK if converged else EXIT_NOT_CONVERGED), extra, files


def _run_poisson(cfg):
    import numpy as np

    from . import fields as F
    from . import poisson as PS

    p = cfg.params
    pc = PS.PoissonConfig(n_paths=p["n_paths"], dt_bm=p["dt_bm"], t_max=p["t_max"], seed=cfg.seed,
                          antithetic=p["antithetic"])
    if p["domain"] == "periodic":
        dom = F.PeriodicCube()
        pts = _points(cfg.seed, p["n_points"], 0.0, dom.side)
    else:
        dom = F.WholeSpace(support_radius=6 * p["width"])
        pts = _points(cfg.seed, p["n_points"], -1.0, 1.0)
    if p["gamma"] == "cos_x1":
        gam = F.FunctionScalar(lambda t, x: p["amplitude"] * np.cos(x[..., 0]))
    else:
        gam = F.GaussianBump(center=(0.0, 0.0, 0.0), width=p["width"], amplitude=p["amplitude"])
    res = PS.grad_pressure_mc(gam, 0.0, pts, pc, dom) if p["gradient"] else PS.pressure_mc(gam, 0.0, pts, pc, dom)
    if p["gradient"]:
        rows = [list(x) + list(v) + list(s) for x, v, s in zip(pts, res.value, res.std_err)]
        header = ["x", "y", "z", "dpx", "dpy", "dpz", "se_x", "se_y", "se_z"]
    else:
        rows = [list(x) + [v, s, t] for x, v, s, t in zip(pts, res.value, res.std_err, res.tail)]
        header = ["x", "y", "z", "p", "std_err", "tail"]
    extra = {"truncation_warning": bool(res.truncation_warning), "unexited_fraction": res.unexited_fraction,
             "exit_residual_bound": res.exit_residual_bound}
    return EXIT_OK, extra, {"pressure.csv": _csv(header, rows)}


def _run_parabolic(cfg):
    from . import fields as F
    from . import flows as FL
    from . import parabolic as PB

    p = cfg.params
    f0 = F.GaussianBump(center=(0.0, 0.0, 0.0), width=p["width"], amplitude=p["amplitude"])
    g = F.Zero() if p["drift"] == "zero" else F.Beltrami(1, 1, 1, 0.0)
    prob = PB.ParabolicProblem(g=g, sigma=p["sigma"], f0=f0, t_final=p["t_final"])
    fc = FL.FlowConfig(sigma=p["sigma"], dt=p["dt"], n_paths=p["n_paths"], seed=cfg.seed, antithetic=p["antithetic"])
    pts = _points(cfg.seed, p["n_points"], -1.0, 1.0)
    vals, se = PB.solve_parabolic(prob, pts, fc)
    rows = [list(x) + [v, s] for x, v, s in zip(pts, vals, se)]
    header = ["x", "y", "z", "f", "std_err"]
    extra = {}
    if p["drift"] == "zero":
        ex = PB.heat_gaussian(p["amplitude"], p["width"], (0, 0, 0), p["sigma"], p["t_final"], pts)
        rows = [r + [e] for r, e in zip(rows, ex)]
        header.append("closed_form")
    return EXIT_OK, extra, {"values.csv": _csv(header, rows)}


def _run_apriori(cfg):
    from . import apriori as AP

    p = cfg.params
    params = AP.AprioriParams(p["K01"], p["beta0"], p["C_qm"], p["C1_qm"])
    T1 = AP.existence_horizon(params, p["ds"])
    t = p["t"]
    if t is None:
        t = 0.99 * T1 if math.isfinite(T1) else 1.0
    sol = AP.solve_bound_odes(params, t, p["ds"])
    extra = {"T1": T1 if math.isfinite(T1) else "inf", "t": t, "bounded_on_t": sol.bounded}
    return EXIT_OK, extra, {"bounds.csv": sol.to_csv(), "horizon.csv": _csv(["T1"], [[T1]])}


def _run_validate(cfg):
    from . import acceptance as AC

    sel = cfg.params["criteria"]
    ids = None if sel == "all" else [int(v) for v in sel.replace(",", " ").split()]
    results = AC.run_all(ids, seed=cfg.seed)
    rows = [[r.number, r.name, "PASS" if r.passed else "FAIL", f"{r.runtime:.2f}", r.detail.replace(",", ";")]
            for r in results]
    ok = all(r.passed for r in results)
    extra = {"acceptance": [r.as_dict() for r in results], "all_passed": ok}
    return (EXIT_OK if ok else EXIT_VALIDATION), extra, {
        "acceptance.csv": _csv(["criterion", "name", "result", "runtime_s", "detail"], rows)
    }


def _run_bench(cfg):
    """Calibrate the std_err predictor constant c = max std_err * sqrt(n_paths)."""
    from . import fields as F
    from . import picard as PC

    p = cfg.params
    dom = F.PeriodicCube(grid_n=p["grid_n"])
    prob = PC.NSProblem(u0=F.Beltrami(1, 1, 1, 0.0), sigma=p["sigma"], t_final=p["t_final"], domain=dom)
    pcfg = PC.PicardConfig(time_grid_n=p["time_grid_n"], grid_n=p["grid_n"], n_paths=p["n_paths"], dt=p["dt"],
                           k_max=1, tol=1.0, seed=cfg.seed)
    t0 = time.perf_counter()
    state = PC.picard_step(PC.picard_init(prob, pcfg), prob, pcfg)
    wall = time.perf_counter() - t0
    se = float(state.u_se.max())
    c = se * math.sqrt(p["n_paths"])
    extra = {"stderr_const": c, "max_std_err": se, "step_wall_time": wall}
    return EXIT_OK, extra, {"bench.csv": _csv(["n_paths", "max_std_err", "stderr_const"], [[p["n_paths"], se, c]])}


_DRIVERS = {
    "solve": _run_solve,
    "poisson": _run_poisson,
    "parabolic": _run_parabolic,
    "apriori": _run_apriori,
    "validate": _run_validate,
    "bench": _run_bench,
}


def _set_threads(n):
    import numba

    cap = numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(max(1, min(int(n), cap)))
    return numba.get_num_threads()


def run(cfg: RunConfig) -> int:
    """Dispatch to the driver, write artifacts and the manifest; return the exit code."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    manifest = {
        "artifact": "stochns",
        "version": __version__,
        "python": platform.python_version(),
        "config": cfg.echo(),
        "status": "running",
    }
    try:
        threads = _set_threads(cfg.threads) if cfg.threads else None
        manifest["threads_used"] = threads
        code, extra, files = _DRIVERS[cfg.subcommand](cfg)
        for name, text in files.items():
            _write_atomic(out / name, text)
        manifest.update(extra)
        manifest["files"] = sorted(files)
        manifest["status"] = {EXIT_OK: "ok", EXIT_NOT_CONVERGED: "not_converged", EXIT_VALIDATION: "validation_failed"}[
            code
        ]
    except Exception as exc:  # noqa: BLE001 - any failure is reported in the manifest
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_ERROR
    manifest["wall_time_s"] = time.perf_counter() - t0
    manifest["exit_code"] = code
    _write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return code


def _json_default(obj):
    try:
        import numpy as np

        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
    except ImportError:  # pragma: no cover
        pass
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return str(obj)


def build_parser():
    ap = argparse.ArgumentParser(prog="stochns", description="Monte Carlo solvers built on stochastic flows.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", type=Path, help="key = value config file")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or all cores)")
    ap.add_argument("--out", type=Path, default=Path("stochns_out"), help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
            return EXIT_ERROR
    if threads is not None and threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return EXIT_ERROR
    try:
        cfg = parse_config(text, args.subcommand)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.threads = threads
    cfg.out = str(args.out)
    code = run(cfg)
    status = {EXIT_OK: "ok", EXIT_NOT_CONVERGED: "not converged", EXIT_VALIDATION: "validation failed"}.get(code, "error")
    print(f"stochns {cfg.subcommand}: {status} (outputs in {cfg.out})")
    if code == EXIT_ERROR:
        try:
            err = json.loads((Path(cfg.out) / "manifest.json").read_text()).get("error")
            if err:
                print(f"error: {err}", file=sys.stderr)
        except (OSError, ValueError):
            pass
    return code


if __name__ == "__main__":
    sys.exit(main())
