"""Projected finite-difference solver for the entry-time variational inequality.

On [0, T) x R the value of waiting solves

    min{ v - Psi,  -v_t - L v } = 0,   v(T, eta) = Psi(T, eta),
    L v = -lambda (eta - mu_bar) v_eta + 1/2 sigma_mu^2 v_eta_eta,

with Psi(t, eta) the interior value evaluated at (t, x0 - kappa t, z0, eta)
and the filter restarted at t.  Time steps run backward with a theta scheme;
each step is a tridiagonal linear complementarity problem solved by projected
SOR.  The eta-axis is truncated with Dirichlet data v = Psi at both edges.
With sigma_mu = 0 the operator is pure transport; v is then the running
maximum of Psi along exact OU characteristics, since an upwind stencil would
add a spurious diffusion (and option value).

The LCP is solved on Psi / max|Psi| so tolerances are relative to the
obstacle scale; stored surfaces are in model units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.interpolate import CubicSpline

from .interior import DomainError, build_interior
from .params import ConfigError, ModelConfig, validate


class PSORConvergenceError(RuntimeError):
    """Projected SOR failed to reach the tolerance (exit code 3 in the CLI)."""


@dataclass(frozen=True)
class Grid2D:
    t_nodes: np.ndarray
    eta_nodes: np.ndarray

    def __post_init__(self) -> None:
        if len(self.t_nodes) < 2 or len(self.eta_nodes) < 3:
            raise ValueError("need at least 2 time nodes and 3 eta nodes")

    @classmethod
    def uniform(cls, T: float, n_t: int, eta_min: float, eta_max: float, n_eta: int) -> Grid2D:
        if not eta_min < eta_max:
            raise ValueError("eta_min must be below eta_max")
        return cls(np.linspace(0.0, T, n_t), np.linspace(eta_min, eta_max, n_eta))

    @property
    def n_t(self) -> int:
        return len(self.t_nodes)

    @property
    def n_eta(self) -> int:
        return len(self.eta_nodes)

    @property
    def dt(self) -> float:
        return float(self.t_nodes[1] - self.t_nodes[0])

    @property
    def h(self) -> float:
        return float(self.eta_nodes[1] - self.eta_nodes[0])

    def refined(self) -> Grid2D:
        """Same domain with the number of intervals doubled on both axes."""
        return Grid2D.uniform(float(self.t_nodes[-1]), 2 * self.n_t - 1, float(self.eta_nodes[0]),
                              float(self.eta_nodes[-1]), 2 * self.n_eta - 1)

    def describe(self) -> str:
        return (f"n_t={self.n_t} n_eta={self.n_eta} eta=[{self.eta_nodes[0]:.6g},"
                f"{self.eta_nodes[-1]:.6g}]")


def base_half_width(config: ModelConfig) -> float:
    mk = config.market
    sm, lam, T = mk.sigma_mu, mk.lambda_, config.T
    parts = [4 * sm * math.sqrt(T), abs(mk.mu0 - mk.mu_bar) + 4 * sm * math.sqrt(T)]
    if lam > 0:
        parts.append(6 * sm / math.sqrt(2 * lam))
    # floor keeps a usable window when sigma_mu = 0
    return max(*parts, abs(mk.mu0 - mk.mu_bar) + 1.0)


def default_grid(config: ModelConfig, n_t: int = 500, n_eta: int = 400, widen: bool = True,
                 edge_rel: float = 1e-6, max_widen: int = 12, growth: float = 1.25,
                 probe_slices: int = 60) -> Grid2D:
    """Truncated grid centred at mu_bar, widened until edge obstacle values are negligible.

    Edges are probed on ``probe_slices`` time slices.  Slices whose whole
    obstacle is already below ``edge_rel`` times the global maximum do not
    constrain the width (near T nothing is gained by widening).
    """
    mb = config.market.mu_bar
    W = base_half_width(config)
    if widen:
        ts = np.linspace(0.0, config.T, probe_slices)[:-1]
        centre = np.array([mb, config.market.mu0])
        for _ in range(max_widen):
            inner = np.array([np.max(np.abs(_model_obstacle_row(config, t, np.linspace(mb - W, mb + W, 41))))
                              for t in ts])
            edges = np.array([np.max(np.abs(_model_obstacle_row(config, t, np.array([mb - W, mb + W]))))
                              for t in ts])
            peak = max(inner.max(), np.max(np.abs(_model_obstacle_row(config, 0.0, centre))))
            live = inner > edge_rel * peak
            if not np.any(edges[live] >= edge_rel * peak):
                break
            W *= growth
    return Grid2D.uniform(config.T, n_t, mb - W, mb + W, n_eta)


# ---------------------------------------------------------------------------
# obstacle


@dataclass(frozen=True)
class Obstacle:
    values: np.ndarray
    grid: Grid2D
    source: str = "model"

    @property
    def scale(self) -> float:
        s = float(np.max(np.abs(self.values)))
        return s if s > 0 else 1.0


def _model_obstacle_row(config: ModelConfig, t: float, eta: np.ndarray) -> np.ndarray:
    if t >= config.T:
        return np.zeros_like(eta)
    co, hb = config.cost, config.habit
    iv = build_interior(config, riccati_start=t)
    return np.asarray(iv.value(t, co.x0 - co.kappa * t, hb.z0, eta), dtype=float)


def build_obstacle(config: ModelConfig, grid: Grid2D) -> Obstacle:
    """Psi[i, j] = interior value at (t_i, x0 - kappa t_i, z0, eta_j), filter restarted at t_i."""
    validate(config).raise_if_invalid()
    rows = []
    for t in grid.t_nodes:
        try:
            rows.append(_model_obstacle_row(config, float(t), grid.eta_nodes))
        except DomainError as exc:
            raise ConfigError(f"budget violated at t={t:.6g}: {exc}") from exc
    values = np.vstack(rows)
    values[-1] = 0.0
    return Obstacle(values=values, grid=grid, source="model")


def obstacle_from_function(grid: Grid2D, fn: Callable[[float, np.ndarray], np.ndarray],
                           source: str = "function") -> Obstacle:
    """Obstacle from any callable psi(t, eta_array); no sign or terminal constraint imposed."""
    values = np.vstack([np.asarray(fn(float(t), grid.eta_nodes), dtype=float) for t in grid.t_nodes])
    return Obstacle(values=values, grid=grid, source=source)


# ---------------------------------------------------------------------------
# discretization and PSOR


@dataclass(frozen=True)
class Scheme:
    theta: float = 1.0
    psor_tol: float = 1e-10
    psor_max_iter: int = 20_000
    omega: float = 1.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.psor_tol <= 0 or self.psor_max_iter < 1:
            raise ValueError("psor_tol > 0 and psor_max_iter >= 1 required")
        if not 0.0 < self.omega < 2.0:
            raise ValueError("omega must lie in (0, 2)")


def generator_bands(config: ModelConfig, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sub, main and super diagonals of L on interior nodes.

    Central differences where the cell Peclet number allows a monotone
    stencil, first-order upwind otherwise (always when sigma_mu = 0).
    """
    mk = config.market
    h = float(eta[1] - eta[0])
    drift = -mk.lambda_ * (eta - mk.mu_bar)
    diff = 0.5 * mk.sigma_mu**2 * np.ones_like(eta)
    central = np.abs(drift) * h <= 2 * diff
    lo = np.where(central, diff / h**2 - drift / (2 * h), diff / h**2 + np.maximum(-drift, 0) / h)
    up = np.where(central, diff / h**2 + drift / (2 * h), diff / h**2 + np.maximum(drift, 0) / h)
    return lo, -(lo + up), up


@numba.njit(cache=True, nogil=True)
def _psor_march(psi, lo, mid, up, dt, theta, omega, tol, max_iter):
    n_t, n = psi.shape
    v = np.empty_like(psi)
    v[n_t - 1] = psi[n_t - 1]
    iters = np.zeros(n_t, dtype=np.int64)
    resid = np.zeros(n_t)
    rhs = np.empty(n)
    for i in range(n_t - 2, -1, -1):
        nxt = v[i + 1]
        cur = v[i]
        for j in range(n):
            cur[j] = max(nxt[j], psi[i, j])
        cur[0] = psi[i, 0]
        cur[n - 1] = psi[i, n - 1]
        for j in range(1, n - 1):
            rhs[j] = nxt[j] + (1.0 - theta) * dt * (lo[j] * nxt[j - 1] + mid[j] * nxt[j] + up[j] * nxt[j + 1])
        k = 0
        err = np.inf
        while k < max_iter:
            err = 0.0
            for j in range(1, n - 1):
                a = -theta * dt * lo[j]
                b = 1.0 - theta * dt * mid[j]
                c = -theta * dt * up[j]
                gs = (rhs[j] - a * cur[j - 1] - c * cur[j + 1]) / b
                new = max(psi[i, j], cur[j] + omega * (gs - cur[j]))
                d = abs(new - cur[j])
                if d > err:
                    err = d
                cur[j] = new
            k += 1
            if not np.isfinite(err):
                break
            if err < tol:
                break
        iters[i] = k
        resid[i] = err
        if not (err < tol):
            return v, iters, resid, i
    return v, iters, resid, -1


@dataclass(frozen=True)
class VISolution:
    grid: Grid2D
    value: np.ndarray
    obstacle: np.ndarray
    continuation: np.ndarray
    tol_gap: float
    scheme: Scheme
    scale: float
    omega_used: float
    iterations: np.ndarray
    complementarity: float
    diagnostics: dict = field(default_factory=dict)

    def value_at(self, t: float, eta: float) -> float:
        return float(bilinear(self.grid, self.value, np.array([t]), np.array([eta]))[0])

    @property
    def v0(self) -> float:
        """Surface value at (0, mu0) as recorded at solve time."""
        return self.diagnostics["v0"]


def solve_vi(config: ModelConfig, grid: Grid2D, obstacle: Obstacle, scheme: Scheme | None = None,
             terminal: np.ndarray | None = None) -> VISolution:
    """Backward theta-scheme with a PSOR complementarity solve at each step."""
    scheme = scheme or Scheme()
    if obstacle.values.shape != (grid.n_t, grid.n_eta):
        raise ValueError("obstacle does not match grid")
    scale = obstacle.scale
    psi = np.ascontiguousarray(obstacle.values / scale)
    if terminal is not None:
        psi = psi.copy()
        psi[-1] = np.asarray(terminal, dtype=float) / scale
    if config.market.sigma_mu == 0:
        return _finish(config, grid, obstacle, scheme, *_transport_march(config, grid, psi), omega_used=math.nan,
                       terminal=terminal)
    lo, mid, up = generator_bands(config, grid.eta_nodes)
    dt = grid.dt
    omega_used = scheme.omega
    v, iters, resid, failed = _psor_march(psi, lo, mid, up, dt, scheme.theta, scheme.omega,
                                          scheme.psor_tol, scheme.psor_max_iter)
    if failed >= 0 and scheme.omega != 1.0:
        omega_used = 1.0
        v, iters, resid, failed = _psor_march(psi, lo, mid, up, dt, scheme.theta, 1.0,
                                              scheme.psor_tol, scheme.psor_max_iter)
    if failed >= 0:
        raise PSORConvergenceError(
            f"PSOR did not converge at t={grid.t_nodes[failed]:.6g}: last update {resid[failed]:.3e} "
            f"after {iters[failed]} iterations (tol {scheme.psor_tol:.1e})")
    comp = complementarity(v, psi, lo[1:-1], mid[1:-1], up[1:-1], dt, scheme.theta)
    return _finish(config, grid, obstacle, scheme, v, iters, resid, comp, omega_used, terminal)


def _transport_march(config: ModelConfig, grid: Grid2D, psi: np.ndarray):
    """v(t_i, eta) = max over k >= i of psi(t_k, eta_char) along exact OU characteristics.

    Only the smooth obstacle is interpolated (cubic, all time rows at once
    for each lag), so the kink of v at the stopping set costs no accuracy.
    """
    mk = config.market
    eta = grid.eta_nodes
    n = grid.n_t
    rows = CubicSpline(eta, psi.T, axis=0)
    v = psi.copy()
    for lag in range(1, n):
        foot = mk.mu_bar + (eta - mk.mu_bar) * math.exp(-mk.lambda_ * lag * grid.dt)
        later = rows(np.clip(foot, eta[0], eta[-1]))[:, lag:].T
        np.maximum(v[: n - lag], later, out=v[: n - lag])
    # exact in this representation: v - psi >= 0 and v equals the best later reward
    comp = 0.0
    return v, np.zeros(n, dtype=np.int64), np.zeros(n), comp


def _finish(config, grid, obstacle, scheme, v, iters, resid, comp, omega_used, terminal=None) -> VISolution:
    scale = obstacle.scale
    value = v * scale
    value[-1] = obstacle.values[-1] if terminal is None else terminal
    tol_gap = 1e-9 * (1 + float(np.max(np.abs(obstacle.values))))
    cont = (value - obstacle.values) > tol_gap
    cont[-1] = False
    v0 = float(bilinear(grid, value, np.array([0.0]), np.array([config.market.mu0]))[0])
    diag = {"v0": v0, "max_psor_iter": int(iters.max()), "mean_psor_iter": float(iters[:-1].mean()),
            "max_psor_update": float(resid.max()), "scale": scale}
    psi_raw = obstacle.values.copy()
    for arr in (value, psi_raw, cont):
        arr.setflags(write=False)
    return VISolution(grid=grid, value=value, obstacle=psi_raw, continuation=cont, tol_gap=tol_gap,
                      scheme=scheme, scale=scale, omega_used=omega_used, iterations=iters,
                      complementarity=comp, diagnostics=diag)


def complementarity(v, psi, lo, mid, up, dt, theta) -> float:
    """max |min(v - psi, dt (-v_t - L v))| over interior nodes, normalized units."""
    nxt, cur = v[1:], v[:-1]

    def apply(u):
        return lo * u[:, :-2] + mid * u[:, 1:-1] + up * u[:, 2:]

    op = (cur[:, 1:-1] - nxt[:, 1:-1]) - dt * (theta * apply(cur) + (1 - theta) * apply(nxt))
    gap = cur[:, 1:-1] - psi[:-1, 1:-1]
    return float(np.max(np.abs(np.minimum(gap, op))))


def bilinear(grid: Grid2D, surface: np.ndarray, t, eta) -> np.ndarray:
    """Bilinear interpolation of a (n_t, n_eta) surface; eta is clipped to the grid."""
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    tn, en = grid.t_nodes, grid.eta_nodes
    ti = np.clip((t - tn[0]) / grid.dt, 0, grid.n_t - 1 - 1e-12)
    ei = np.clip((eta - en[0]) / grid.h, 0, grid.n_eta - 1 - 1e-12)
    i0, j0 = np.floor(ti).astype(int), np.floor(ei).astype(int)
    ft, fe = ti - i0, ei - j0
    i1, j1 = np.minimum(i0 + 1, grid.n_t - 1), np.minimum(j0 + 1, grid.n_eta - 1)
    return ((1 - ft) * (1 - fe) * surface[i0, j0] + (1 - ft) * fe * surface[i0, j1]
            + ft * (1 - fe) * surface[i1, j0] + ft * fe * surface[i1, j1])


# ---------------------------------------------------------------------------
# boundary and stopping rule


@dataclass(frozen=True)
class BoundaryRecord:
    t: float
    lower_eta: float
    upper_eta: float
    region: str
    n_intervals: int = 0


def _crossing(e0, e1, g0, g1, tol):
    """eta where gap - tol changes sign between two nodes (linear in gap)."""
    d0, d1 = g0 - tol, g1 - tol
    if d1 == d0:
        return 0.5 * (e0 + e1)
    return e0 + (e1 - e0) * d0 / (d0 - d1)


def extract_boundary(sol: VISolution) -> list[BoundaryRecord]:
    """Per slice, edges of the outermost continuation interval.

    ``region`` is ``"stop"`` when the whole slice is stopping, ``"continue"``
    when no node is stopping, and otherwise names which sides carry a
    stopping set (``"two-sided"``, ``"lower"``, ``"upper"``).
    """
    eta = sol.grid.eta_nodes
    gap = sol.value - sol.obstacle
    out = []
    for i, t in enumerate(sol.grid.t_nodes):
        cont = sol.continuation[i]
        if not cont.any():
            out.append(BoundaryRecord(float(t), math.nan, math.nan, "stop", 0))
            continue
        if cont.all():
            out.append(BoundaryRecord(float(t), math.nan, math.nan, "continue", 1))
            continue
        idx = np.nonzero(cont)[0]
        n_int = 1 + int(np.sum(np.diff(idx) > 1))
        first, last = idx[0], idx[-1]
        lower = upper = math.nan
        if first > 0:
            lower = _crossing(eta[first - 1], eta[first], gap[i, first - 1], gap[i, first], sol.tol_gap)
        if last < len(eta) - 1:
            upper = _crossing(eta[last], eta[last + 1], gap[i, last], gap[i, last + 1], sol.tol_gap)
        region = {(True, True): "two-sided", (True, False): "lower", (False, True): "upper"}[
            (first > 0, last < len(eta) - 1)]
        out.append(BoundaryRecord(float(t), float(lower), float(upper), region, n_int))
    return out


@dataclass(frozen=True)
class StoppingRule:
    """stop(t, eta) from the interpolated gap v - Psi; ties and t >= T stop."""

    grid: Grid2D
    gap: np.ndarray
    tol_gap: float
    horizon: float
    name: str = "vi"

    def __call__(self, t, eta) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=float), np.shape(eta))
        eta = np.asarray(eta, dtype=float)
        g = bilinear(self.grid, self.gap, t, eta)
        outside = (eta <= self.grid.eta_nodes[0]) | (eta >= self.grid.eta_nodes[-1])
        return (g <= self.tol_gap) | (t >= self.horizon - 1e-12) | outside


def entry_rule(sol: VISolution) -> StoppingRule:
    return StoppingRule(grid=sol.grid, gap=np.asarray(sol.value - sol.obstacle), tol_gap=sol.tol_gap,
                        horizon=float(sol.grid.t_nodes[-1]))


def barrier_distances(records: list[BoundaryRecord], mu_bar: float) -> tuple[np.ndarray, np.ndarray]:
    """Distances mu_bar - lower_eta and upper_eta - mu_bar per slice (NaN where absent)."""
    lower = np.array([mu_bar - r.lower_eta for r in records])
    upper = np.array([r.upper_eta - mu_bar for r in records])
    return lower, upper


def solve_model(config: ModelConfig, grid: Grid2D | None = None, scheme: Scheme | None = None,
                n_t: int = 500, n_eta: int = 400) -> VISolution:
    grid = grid or default_grid(config, n_t, n_eta)
    return solve_vi(config, grid, build_obstacle(config, grid), scheme)
