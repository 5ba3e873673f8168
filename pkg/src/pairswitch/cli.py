"""Command-line interface: ``pairswitch {solve,verify,oracle,simulate,sweep}``.

Configuration files are flat ``key = value`` lines; ``#`` starts a comment.
Model keys: ``model`` (OU or IGBM), ``mu``, ``sigma``, ``rho``, ``lambda``,
``epsilon`` and ``L`` (required for IGBM, default 0 for OU).  Command keys
are listed in :data:`COMMAND_KEYS`; anything else is rejected.

CSV output has a header row and numbers at 6 significant digits.
Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 verification
or oracle mismatch.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys

import numpy as np

from .model import ModelKind, ModelParams, ParameterError
from .specfun import EvaluationError, SpecfunDomainError
from .solver import Coefficients, SolverError, solve

__all__ = ["main", "parse_config", "ConfigError", "params_from_config"]

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_MISMATCH = 0, 2, 3, 4

MODEL_KEYS = ("model", "mu", "sigma", "rho", "lambda", "epsilon", "L")
COMMAND_KEYS = {
    "solve": (),
    "verify": ("grid", "perturb_coeff", "perturb_amount"),
    "oracle": ("grid",),
    "simulate": ("x0", "regime", "horizon", "dt", "paths", "seed", "perturb", "trace_out"),
    "sweep": ("sweep_key", "sweep_start", "sweep_stop", "sweep_steps"),
}
SWEEP_KEYS = {"mu": "mu", "sigma": "sigma", "L": "L", "epsilon": "epsilon", "lambda": "lam"}


class ConfigError(ValueError):
    pass


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def parse_config(text, allowed=None):
    """Parse ``key = value`` lines into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if allowed is not None and key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = val
    return out


def _num(cfg, key, default=None, cast=float):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required key '{key}'")
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise ConfigError(f"key '{key}': cannot parse '{cfg[key]}'") from None


def params_from_config(cfg):
    if "model" not in cfg:
        raise ConfigError("missing required key 'model'")
    try:
        kind = ModelKind(cfg["model"].upper())
    except ValueError:
        raise ConfigError(f"key 'model': expected OU or IGBM, got '{cfg['model']}'") from None
    vals = {k: _num(cfg, k) for k in ("mu", "sigma", "rho", "lambda", "epsilon")}
    L = _num(cfg, "L") if kind is ModelKind.IGBM else _num(cfg, "L", 0.0)
    try:
        return ModelParams(kind, vals["mu"], L, vals["sigma"], vals["rho"], vals["lambda"], vals["epsilon"])
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def _write_csv(rows, header, out):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    text = buf.getvalue()
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _table(pairs):
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k.ljust(width)}  {fmt(v)}" for k, v in pairs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _solve_rows(rep):
    c, k = rep.cutoffs, rep.coeffs
    neg = lambda v: None if v is None else -v
    return [
        ("case", c.case_tag.value),
        ("open_buy", c.open_buy),
        ("close_buy", c.close_buy),
        ("close_sell", c.close_sell),
        ("open_sell", c.open_sell),
        ("xbar_01", neg(c.open_buy)),
        ("xbar_-1", neg(c.close_buy)),
        ("xbar_1", c.close_sell),
        ("xbar_0-1", c.open_sell),
        ("A0", k.A0),
        ("B0", k.B0),
        ("A1", k.A1),
        ("B-1", k.Bm1),
        ("max_smooth_fit_residual", rep.max_residual),
    ]


def cmd_solve(params, cfg, args, stdout):
    rep = solve(params)
    rows = _solve_rows(rep)
    print(_table(rows), file=stdout)
    _write_csv(rows, ["quantity", "value"], args.out)
    return EXIT_OK


def cmd_verify(params, cfg, args, stdout):
    from .valuefn import (SMOOTH_FIT_TOL, QVI_TOL, assemble, qvi_residual, smooth_fit_residuals,
                          smooth_fit_scale, verification_grid)

    rep = solve(params)
    if "perturb_coeff" in cfg:
        name = {"A0": "A0", "B0": "B0", "A1": "A1", "B-1": "Bm1", "Bm1": "Bm1"}.get(cfg["perturb_coeff"])
        if name is None:
            raise ConfigError("perturb_coeff must be one of A0, B0, A1, B-1")
        amount = _num(cfg, "perturb_amount", 1e-3)
        d = rep.coeffs.as_dict()
        d[name] = (d[name] or 0.0) + amount
        rep.coeffs = Coefficients(**d)
    v = assemble(rep)
    n = args.grid or _num(cfg, "grid", 1000, int)
    sf_tol = SMOOTH_FIT_TOL * smooth_fit_scale(v)
    rows = []
    for name, vj, dj in smooth_fit_residuals(v):
        rows.append((f"smooth_fit/{name}/value", abs(vj), sf_tol, abs(vj) <= sf_tol))
        rows.append((f"smooth_fit/{name}/slope", abs(dj), sf_tol, abs(dj) <= sf_tol))
    q = qvi_residual(v, verification_grid(v, n))
    scaled = q.max_scaled()
    for i in (-1, 0, 1):
        for part in ("min_abs", "generator_neg", "obstacle_neg"):
            rows.append((f"qvi/regime{i}/{part}", scaled[i][part], QVI_TOL, scaled[i][part] <= QVI_TOL))
    ok = all(r[3] for r in rows) and q.ok
    rows.append(("overall", None, None, ok))
    print(_table([(r[0], r[1]) for r in rows[:-1]] + [("overall", "pass" if ok else "FAIL")]), file=stdout)
    _write_csv(rows, ["check", "max_residual", "tolerance", "pass"], args.out)
    if rep.cutoffs.case_tag.value == "Case2iii":
        print("v_-1 is the constant -lambda/rho", file=stdout)
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_oracle(params, cfg, args, stdout):
    from .oracle import default_grid, solve_qvi_fd
    from .valuefn import assemble

    rep = solve(params)
    n = args.grid or _num(cfg, "grid", 2001, int)
    grid = default_grid(params, n, cover=rep.cutoffs.edges().values())
    sol = solve_qvi_fd(params, grid)
    h = grid.spacing
    rows = []
    ok = True
    for name, ce in rep.cutoffs.edges().items():
        oe = sol.edges[name]
        if name == "close_sell" and ce is not None and ce <= params.domain_lower:
            ce = None  # selling everywhere: compare against the first interior node
            oe = None if oe is not None and oe <= grid.lower + 1.5 * h else oe
        if ce is None or oe is None:
            agree = (ce is None) == (oe is None)
            rows.append((f"edge/{name}", ce, oe, None, None, agree))
        else:
            cells = abs(oe - ce) / h
            agree = cells <= 2.0
            rows.append((f"edge/{name}", ce, oe, oe - ce, cells, agree))
        ok &= agree
    v = assemble(rep)
    inner = np.arange(1, n - 1)
    for i in (-1, 0, 1):
        xs = sol.x[inner]
        ov = sol.values[i][inner]
        cv = np.array([v.eval(i, x) for x in xs])
        err = float(np.max(np.abs(ov - cv) / (1.0 + np.abs(cv))))
        agree = err < 5e-3
        rows.append((f"value/regime{i}", None, None, err, None, agree))
        ok &= agree
    print(_table([(r[0], r[3] if r[3] is not None else r[5]) for r in rows] + [("overall", "pass" if ok else "FAIL")]),
          file=stdout)
    _write_csv(rows, ["quantity", "closed_form", "oracle", "delta", "delta_cells", "pass"], args.out)
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_simulate(params, cfg, args, stdout):
    from .sim import PathConfig, estimate_gains, perturbed_cutoffs, run_strategy, simulate_path
    from .model import GainFunctions
    from .valuefn import assemble

    rep = solve(params)
    v = assemble(rep)
    x0 = _num(cfg, "x0", params.L) if "x0" in cfg else params.L
    regime = _num(cfg, "regime", 0, int)
    if regime not in (-1, 0, 1):
        raise ConfigError("regime must be -1, 0 or 1")
    horizon = args.horizon or _num(cfg, "horizon", math.log(1e4) / params.rho * 1.05)
    dt = args.dt or _num(cfg, "dt", 0.01)
    paths = args.paths or _num(cfg, "paths", 10000, int)
    seed = args.seed if args.seed is not None else _num(cfg, "seed", 0, int)
    frac = _num(cfg, "perturb", 0.2)
    try:
        pc = PathConfig(horizon, dt, paths, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    strategies = [("optimal", rep.cutoffs)] + (perturbed_cutoffs(rep.cutoffs, frac) if frac > 0 else [])
    outs = estimate_gains(params, x0, regime, [c for _, c in strategies], pc)
    v_ref = v.eval(regime, x0)
    rows = []
    for (name, _), o in zip(strategies, outs):
        occ = o.regime_occupancy
        rows.append((name, o.mean_gain, o.std_error, o.n_switches_mean, occ[-1], occ[0], occ[1], v_ref,
                     o.truncation_bound))
    print(_table([(r[0], f"{r[1]:.6g} +- {r[2]:.2g}") for r in rows] + [("v(x0) closed form", v_ref)]), file=stdout)
    _write_csv(rows, ["strategy", "mean_gain", "std_error", "n_switches_mean", "occupancy_-1", "occupancy_0",
                      "occupancy_1", "value_closed_form", "truncation_bound"], args.out)
    if "trace_out" in cfg:
        t, x = simulate_path(params, x0, pc, 0)
        _, reg = run_strategy((t, x), rep.cutoffs, regime, GainFunctions(params.epsilon), params)
        _write_csv(zip(t, x, reg), ["t", "x", "regime"], cfg["trace_out"])
    return EXIT_OK


def cmd_sweep(params, cfg, args, stdout):
    key = cfg.get("sweep_key")
    if key not in SWEEP_KEYS:
        raise ConfigError(f"sweep_key must be one of {sorted(SWEEP_KEYS)}")
    start, stop = _num(cfg, "sweep_start"), _num(cfg, "sweep_stop")
    steps = _num(cfg, "sweep_steps", None, int)
    if steps < 1:
        raise ConfigError("sweep_steps must be >= 1")
    rows = []
    for val in np.linspace(start, stop, steps):
        try:
            p = params.replace(**{SWEEP_KEYS[key]: float(val)})
            rep = solve(p)
            c = rep.cutoffs
            rows.append((float(val), c.case_tag.value, c.open_buy, c.close_buy, c.close_sell, c.open_sell, False, ""))
        except (ParameterError, SolverError, EvaluationError, SpecfunDomainError) as exc:
            rows.append((float(val), "", None, None, None, None, True, str(exc).replace("\n", " ")))
    text = _write_csv(rows, [key, "case", "open_buy", "close_buy", "close_sell", "open_sell", "failed", "message"],
                      args.out)
    if not args.out:
        stdout.write(text)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "oracle": cmd_oracle, "simulate": cmd_simulate,
            "sweep": cmd_sweep}


def build_parser():
    ap = argparse.ArgumentParser(prog="pairswitch", description="Optimal switching cutoffs for pairs trading.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="key = value configuration file")
        sp.add_argument("--out", help="CSV output path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--grid", type=int)
        sp.add_argument("--paths", type=int)
        sp.add_argument("--horizon", type=float)
        sp.add_argument("--dt", type=float)
    return ap


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
        cfg = parse_config(text, set(MODEL_KEYS) | set(COMMAND_KEYS[args.command]))
        params = params_from_config(cfg)
        return COMMANDS[args.command](params, cfg, args, stdout)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID
    except (SolverError, EvaluationError, SpecfunDomainError) as exc:
        print(f"solver error: {exc}", file=stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(f"diagnostics: {diag}", file=stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
