"""Parameter ladders: value at (0, mu0) and entry barriers across a sweep."""

from __future__ import annotations

import json
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import SWEEPABLE, ConfigError, ModelConfig, validate
from .vi_solver import (BoundaryRecord, Grid2D, Scheme, VISolution, barrier_distances, base_half_width,
                        build_obstacle, default_grid, extract_boundary, solve_vi)

# expected sign of d v(0, mu0) / d param; None = no claim
EXPECTED_VALUE_TREND = {"delta": -1, "alpha": +1, "z0": -1, "kappa": -1, "rho": None, "sigma_mu": None}
STRICT_GAP = 1e-8
FIGURE1_DELTAS = (0.05, 0.25, 0.45, 0.55, 0.75)


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple[float, ...]
    base: ModelConfig

    def __post_init__(self) -> None:
        if self.param not in SWEEPABLE:
            raise ValueError(f"cannot sweep {self.param!r}; choose from {', '.join(SWEEPABLE)}")
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if len(vals) < 2 or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("ladder must be strictly increasing with at least two values")

    def configs(self) -> list[ModelConfig]:
        return [self.base.with_param(self.param, v) for v in self.values]


@dataclass(frozen=True)
class SweepPoint:
    value: float
    config: ModelConfig
    solution: VISolution
    boundary: list[BoundaryRecord]

    @property
    def v0(self) -> float:
        return self.solution.v0


@dataclass(frozen=True)
class SweepReport:
    spec: SweepSpec
    grid: Grid2D
    points: list[SweepPoint]
    flags: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"param": self.spec.param, "values": list(self.spec.values), "grid": self.grid.describe(),
                "v0": [p.v0 for p in self.points], "flags": self.flags}


def shared_grid(configs: list[ModelConfig], n_t: int, n_eta: int) -> Grid2D:
    """Widest default grid over the ladder so every solve shares the same nodes."""
    grids = [default_grid(c, n_t, n_eta) for c in configs]
    mb = configs[0].market.mu_bar
    W = max(max(g.eta_nodes[-1] - mb, mb - g.eta_nodes[0]) for g in grids)
    W = max(W, max(base_half_width(c) for c in configs))
    return Grid2D.uniform(configs[0].T, n_t, mb - W, mb + W, n_eta)


def value_trend(values: list[float], direction: int | None) -> dict:
    """Weak and strict monotonicity of a ladder of values in the expected direction."""
    if direction is None:
        return {"expected": None}
    d = np.diff(np.asarray(values)) * direction
    return {"expected": "increasing" if direction > 0 else "decreasing",
            "weak": bool(np.all(d >= -1e-12 * (1 + np.abs(values[:-1])))),
            "strict": bool(np.all(d > STRICT_GAP)),
            "min_step": float(d.min())}


def barrier_trend(points: list[SweepPoint], mu_bar: float) -> dict:
    """Fraction of slices where both barrier distances are nondecreasing along the ladder.

    Slices that are entirely stopping for every ladder value (the terminal
    slice) are excluded; a slice missing a barrier for some value counts as
    a failure.
    """
    dists = [barrier_distances(p.boundary, mu_bar) for p in points]
    regions = [[r.region for r in p.boundary] for p in points]
    n_t = len(points[0].boundary)
    good = total = 0
    for i in range(n_t):
        if all(reg[i] == "stop" for reg in regions):
            continue
        total += 1
        lo = np.array([d[0][i] for d in dists])
        up = np.array([d[1][i] for d in dists])
        if np.all(np.isfinite(lo)) and np.all(np.isfinite(up)) and np.all(np.diff(lo) >= 0) and np.all(np.diff(up) >= 0):
            good += 1
    frac = good / total if total else 1.0
    return {"fraction_nondecreasing": frac, "slices": total, "pass_90": frac >= 0.9}


def run_sweep(spec: SweepSpec, grid: Grid2D | None = None, scheme: Scheme | None = None, n_t: int = 500,
              n_eta: int = 400, workers: int | None = None) -> SweepReport:
    configs = spec.configs()
    bad = [(v, validate(c)) for v, c in zip(spec.values, configs)]
    bad = [(v, r) for v, r in bad if not r.ok]
    if bad:
        raise ConfigError("; ".join(f"{spec.param}={v}: {', '.join(m.message for m in r.errors)}" for v, r in bad))
    grid = grid or shared_grid(configs, n_t, n_eta)
    scheme = scheme or Scheme()

    def solve(cfg):
        sol = solve_vi(cfg, grid, build_obstacle(cfg, grid), scheme)
        return sol, extract_boundary(sol)

    with ThreadPoolExecutor(workers or len(configs)) as pool:
        results = list(pool.map(solve, configs))
    points = [SweepPoint(v, c, s, b) for v, c, (s, b) in zip(spec.values, configs, results)]
    flags = {"value": value_trend([p.v0 for p in points], EXPECTED_VALUE_TREND[spec.param])}
    if spec.param == "delta":
        flags["barrier"] = barrier_trend(points, spec.base.market.mu_bar)
    return SweepReport(spec, grid, points, flags)


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")


def provenance(config: ModelConfig, grid: Grid2D | None = None, scheme: Scheme | None = None, **extra) -> str:
    parts = [f"config={config.digest()}"]
    if grid is not None:
        parts.append(f"grid={grid.describe()}")
    if scheme is not None:
        parts.append(f"scheme=theta={scheme.theta},psor_tol={scheme.psor_tol:g},omega={scheme.omega}")
    parts.extend(f"{k}={v}" for k, v in extra.items())
    parts.append(f"version={describe_version()}")
    return "# " + " ".join(parts)


def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return __version__


def write_csv(path: Path, header: str, columns: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="\n") as fh:
        fh.write(header + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def boundary_rows(records: list[BoundaryRecord]):
    return [(r.t, r.lower_eta, r.upper_eta) for r in records]


def write_boundary(path: Path, sol: VISolution, config: ModelConfig, records=None) -> Path:
    records = records if records is not None else extract_boundary(sol)
    return write_csv(path, provenance(config, sol.grid, sol.scheme), ["t", "lower_eta", "upper_eta"],
                     boundary_rows(records))


def write_surface(path: Path, sol: VISolution, config: ModelConfig) -> Path:
    g = sol.grid

    def rows():
        for i, t in enumerate(g.t_nodes):
            for j, e in enumerate(g.eta_nodes):
                yield t, e, sol.value[i, j], sol.obstacle[i, j], bool(sol.continuation[i, j])

    return write_csv(path, provenance(config, g, sol.scheme), ["t", "eta", "v", "obstacle", "in_continuation"], rows())


def write_sweep(report: SweepReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for p in report.points:
        name = f"{report.spec.param}_{float(p.value)!r}.csv"
        files.append(write_boundary(out_dir / name, p.solution, p.config, p.boundary))
    summary = out_dir / "summary.json"
    summary.write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    files.append(summary)
    return files


def emit_figure1_data(config: ModelConfig, out_dir: Path, grid: Grid2D | None = None,
                      scheme: Scheme | None = None, delta_ladder=FIGURE1_DELTAS, n_t: int = 500,
                      n_eta: int = 400) -> tuple[SweepReport, list[Path]]:
    """One (t, lower_eta, upper_eta) CSV per delta plus a summary JSON."""
    report = run_sweep(SweepSpec("delta", tuple(delta_ladder), config), grid, scheme, n_t, n_eta)
    return report, write_sweep(report, out_dir)
