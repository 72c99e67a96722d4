"""Command-line front end.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration, 3 solver
did not converge.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .filtering import DegenerateModelError, riccati_explicit, riccati_ode_oracle
from .interior import DomainError, abc_ode_residuals, aux_ode_oracle, build_interior
from .params import ConfigError, ModelConfig, figure1_config, load_config, validate
from .simulation import PathConfig, SimulationError, run_composite, run_stage2
from .sweeps import (FIGURE1_DELTAS, SweepSpec, emit_figure1_data, fmt, provenance, run_sweep, write_boundary,
                     write_csv, write_surface, write_sweep)
from .vi_solver import PSORConvergenceError, Scheme, build_obstacle, default_grid, entry_rule, solve_vi

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _config(args) -> ModelConfig:
    return load_config(args.config) if args.config else figure1_config()


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def _scheme(args) -> Scheme:
    return Scheme(theta=args.theta, psor_tol=args.psor_tol, psor_max_iter=args.psor_max_iter)


def _solve(args, cfg):
    validate(cfg).raise_if_invalid()
    grid = default_grid(cfg, args.nt, args.neta)
    return solve_vi(cfg, grid, build_obstacle(cfg, grid), _scheme(args))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    cfg = _config(args)
    report = validate(cfg)
    _emit({"ok": report.ok, "config": cfg.digest(),
           "errors": [v.message for v in report.errors], "warnings": [v.message for v in report.warnings]})
    return EXIT_OK if report.ok else EXIT_CONFIG


def cmd_value(args) -> int:
    cfg = _config(args)
    validate(cfg).raise_if_invalid()
    iv = build_interior(cfg, riccati_start=args.riccati_start)
    x = args.x if args.x is not None else cfg.cost.x0
    z = args.z if args.z is not None else cfg.habit.z0
    eta = args.eta if args.eta is not None else cfg.market.mu0
    out = {"t": args.t, "x": x, "z": z, "eta": eta, "V": float(iv.value(args.t, x, z, eta)),
           "N": float(iv.n_value(args.t, eta)), "N_eta": float(iv.n_eta(args.t, eta))}
    if args.t < cfg.T:
        out.update({k: float(v) for k, v in iv.policies(args.t, x, z, eta).items()})
    _emit(out)
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    t0 = time.perf_counter()
    sol = _solve(args, cfg)
    out = Path(args.out)
    files = [write_surface(out / "surface.csv", sol, cfg), write_boundary(out / "boundary.csv", sol, cfg)]
    _emit({"v0": sol.v0, "grid": sol.grid.describe(), "complementarity": sol.complementarity,
           "omega": sol.omega_used, "diagnostics": sol.diagnostics, "seconds": time.perf_counter() - t0,
           "files": [str(f) for f in files]})
    return EXIT_OK


def cmd_boundary(args) -> int:
    cfg = _config(args)
    sol = _solve(args, cfg)
    if args.out:
        path = write_boundary(Path(args.out), sol, cfg)
        _emit({"file": str(path), "v0": sol.v0})
    else:
        from .vi_solver import extract_boundary
        print(provenance(cfg, sol.grid, sol.scheme))
        print("t,lower_eta,upper_eta")
        for r in extract_boundary(sol):
            print(",".join(fmt(v) for v in (r.t, r.lower_eta, r.upper_eta)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    validate(cfg).raise_if_invalid()
    pc = PathConfig(n_paths=args.paths, dt=args.dt, seed=args.seed, antithetic=not args.no_antithetic)
    if args.mode == "stage2":
        t = args.t
        x = args.x if args.x is not None else cfg.cost.x0 - cfg.cost.kappa * t
        z = args.z if args.z is not None else cfg.habit.z0
        mu = args.mu if args.mu is not None else cfg.market.mu0
        res = run_stage2(cfg, {"t": t, "x": x, "z": z, "mu": mu}, pc, coarse=not args.no_bias)
        agg = res.to_dict()
        agg["agrees"] = bool(res.agrees())
        per_path = (("utility", res.utilities), ("min_surplus", res.min_surplus), ("min_c_minus_z", res.min_c_minus_z))
    else:
        sol = _solve(args, cfg)
        res = run_composite(cfg, entry_rule(sol), pc)
        agg = res.to_dict()
        agg["v0"] = sol.v0
        per_path = (("tau", res.tau), ("mu_tau", res.mu_tau), ("reward", res.rewards))
    if args.per_path:
        cols = [name for name, _ in per_path]
        rows = zip(range(len(per_path[0][1])), *(col for _, col in per_path))
        write_csv(Path(args.per_path), provenance(cfg, seed=args.seed, dt=args.dt), ["path", *cols], rows)
        agg["per_path_file"] = args.per_path
    _emit(agg)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = tuple(float(v) for v in args.values.split(","))
    try:
        spec = SweepSpec(args.param, values, cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = run_sweep(spec, scheme=_scheme(args), n_t=args.nt, n_eta=args.neta)
    files = write_sweep(report, Path(args.out)) if args.out else []
    _emit({**report.summary(), "files": [str(f) for f in files]})
    return EXIT_OK


def cmd_figure1(args) -> int:
    cfg = _config(args)
    ladder = tuple(float(v) for v in args.values.split(",")) if args.values else FIGURE1_DELTAS
    report, files = emit_figure1_data(cfg, Path(args.out), scheme=_scheme(args), delta_ladder=ladder,
                                      n_t=args.nt, n_eta=args.neta)
    _emit({**report.summary(), "files": [str(f) for f in files]})
    return EXIT_OK


def ode_suite(cfg: ModelConfig, n: int = 50, rk_steps: int = 10_000) -> dict:
    """Explicit closed forms against fixed-step RK4, plus A, B, C residuals."""
    iv = build_interior(cfg)
    g = np.linspace(0.0, cfg.T, n)
    tt, ss = np.meshgrid(g, g, indexing="ij")
    upper = tt < ss
    t_, s_ = tt[upper], ss[upper]
    t0 = time.perf_counter()
    ref = aux_ode_oracle(cfg, t_, s_, rk_steps)
    explicit = iv.aux.all(t_, s_)
    scale = np.maximum(np.abs(ref), 1e-12)
    aux_rel = (np.abs(explicit - ref) / scale).max(axis=1)
    aux_seconds = time.perf_counter() - t0
    keep = (t_ > 1e-4) & (s_ - t_ > 1e-4)
    abc = np.abs(abc_ode_residuals(cfg, iv.abc, t_[keep], s_[keep])).max(axis=1)
    abc_unhalved = float(np.abs(abc_ode_residuals(cfg, iv.abc, t_[keep], s_[keep], unhalved=True)[2]).max())
    path = riccati_explicit(cfg)
    ts = np.linspace(0.0, cfg.T, 26)[1:]
    ode = np.array([riccati_ode_oracle(cfg, 0.0, t, 1e-3) for t in ts])
    ric = float(np.max(np.abs(path(ts) - ode) / np.maximum(np.abs(ode), 1e-300)))
    return {"aux_max_rel": dict(zip(("a", "b", "l", "w", "g"), aux_rel.tolist())), "aux_seconds": aux_seconds,
            "abc_max_residual": dict(zip("ABC", abc.tolist())), "C_unhalved_max_residual": abc_unhalved,
            "riccati_max_rel": ric}


def cmd_check_odes(args) -> int:
    cfg = _config(args)
    validate(cfg).raise_if_invalid()
    rep = ode_suite(cfg, args.grid)
    ok = (max(rep["aux_max_rel"].values()) <= args.tol and max(rep["abc_max_residual"].values()) <= args.abc_tol
          and rep["riccati_max_rel"] <= args.tol)
    rep["ok"] = ok
    _emit(rep)
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------


def _add_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nt", type=int, default=500, help="time nodes (default 500)")
    p.add_argument("--neta", type=int, default=400, help="drift nodes (default 400)")
    p.add_argument("--theta", type=float, default=1.0, help="1 implicit Euler, 0.5 Crank-Nicolson")
    p.add_argument("--psor-tol", type=float, default=1e-10)
    p.add_argument("--psor-max-iter", type=int, default=20_000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="habit-entry", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config (default: the sensitivity-figure parameters)")
        p.set_defaults(func=fn)
        return p

    command("validate", cmd_validate, "check parameter admissibility")

    p = command("value", cmd_value, "interior value, N, N_eta and feedback controls as JSON")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x", type=float)
    p.add_argument("--z", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--riccati-start", type=float, default=0.0)

    p = command("solve", cmd_solve, "solve the entry-time VI; write surface.csv and boundary.csv")
    _add_grid(p)
    p.add_argument("--out", default="out")

    p = command("boundary", cmd_boundary, "free boundary (t, lower_eta, upper_eta) as CSV")
    _add_grid(p)
    p.add_argument("--out", help="CSV file (default stdout)")

    p = command("simulate", cmd_simulate, "Monte Carlo: stage-two utility or composite entry value")
    p.add_argument("--mode", choices=("stage2", "composite"), default="stage2")
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=20240601)
    p.add_argument("--no-antithetic", action="store_true")
    p.add_argument("--no-bias", action="store_true", help="skip the 2dt run used for the dt-bias estimate")
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--x", type=float)
    p.add_argument("--z", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--per-path", help="write per-path CSV here")
    _add_grid(p)

    p = command("sweep", cmd_sweep, "solve along a parameter ladder")
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated, strictly increasing")
    p.add_argument("--out")
    _add_grid(p)

    p = command("figure1", cmd_figure1, "boundary CSVs for the delta ladder of the sensitivity figure")
    p.add_argument("--values", help="override the delta ladder")
    p.add_argument("--out", default="figure1")
    _add_grid(p)

    p = command("check-odes", cmd_check_odes, "closed forms against RK4 and ODE residuals")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--abc-tol", type=float, default=1e-4)
    p.add_argument("--grid", type=int, default=50)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DegenerateModelError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PSORConvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
