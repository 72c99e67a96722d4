"""Monte Carlo checks of the closed forms and of the entry rule.

Stage one simulates the drift under full information with the exact OU
transition.  Stage two runs wealth, habit and the Kalman-Bucy filter under the
feedback controls in innovation form,

    dX = (pi mu_hat - c) dt + sigma_s pi dW_hat,
    dZ = (delta c - alpha Z) dt,
    dW_hat = ((mu - mu_hat) dt + sigma_s dW) / sigma_s,

and accumulates int (c - Z)^p / p dt with a left-point rule.  Paths are split
into fixed partitions, each with its own Philox stream spawned from the seed,
so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.interpolate import RectBivariateSpline

from .filtering import filter_gain, riccati_explicit
from .interior import InteriorValue, build_interior, entry_value
from .params import ModelConfig, subsistence_factor
from .vi_solver import VISolution, bilinear, entry_rule

N_PARTITIONS = 8


@dataclass(frozen=True)
class PathConfig:
    n_paths: int = 10_000
    dt: float = 1e-3
    seed: int = 20240601
    antithetic: bool = True

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    def within(self, target: float, k: float = 3.0, budget: float = 0.0) -> bool:
        return abs(self.mean - target) <= k * self.stderr + budget

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.n}


def estimate(samples: np.ndarray, pathcfg: PathConfig | None = None) -> Estimate:
    """Mean and standard error.

    Antithetic samples are laid out [plus..., minus...] within each partition;
    pairs are averaged first so the standard error is honest.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if pathcfg is not None and pathcfg.antithetic:
        x = pair_means(x, _partition_sizes(pathcfg))
    m = math.fsum(x) / x.size
    if x.size < 2:
        return Estimate(m, math.nan, n)
    var = math.fsum((x - m) ** 2) / (x.size - 1)
    return Estimate(m, math.sqrt(var / x.size), n)


def pair_means(x: np.ndarray, sizes: list[int]) -> np.ndarray:
    if sum(sizes) != x.size:
        raise ValueError("sample count does not match partition sizes")
    out = []
    for p in np.split(x, np.cumsum(sizes)[:-1]):
        h = p.size // 2
        out.append(0.5 * (p[:h] + p[h:]))
    return np.concatenate(out)


def _partition_sizes(pc: PathConfig) -> list[int]:
    parts = N_PARTITIONS if pc.n_paths >= 2 * N_PARTITIONS else 1
    unit = 2 if pc.antithetic else 1
    base = [pc.n_paths // unit // parts * unit] * parts
    rest = pc.n_paths - sum(base)
    for i in range(rest // unit):
        base[i] += unit
    return base


def _streams(pc: PathConfig, parts: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(pc.seed).spawn(parts)]


class _Normals:
    """Standard normals for one partition, mirrored when antithetic."""

    def __init__(self, rng: np.random.Generator, n: int, antithetic: bool):
        self.rng, self.n, self.anti = rng, n, antithetic

    def __call__(self, k: int) -> np.ndarray:
        if self.anti:
            z = self.rng.standard_normal((k, self.n // 2))
            return np.concatenate([z, -z], axis=1)
        return self.rng.standard_normal((k, self.n))


def _map_partitions(fn, pc: PathConfig) -> list:
    sizes = _partition_sizes(pc)
    streams = _streams(pc, len(sizes))
    jobs = [(rng, n) for rng, n in zip(streams, sizes)]
    workers = min(len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        return [fn(rng, n) for rng, n in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


# ---------------------------------------------------------------------------
# drift


def ou_transition(config: ModelConfig, dt: float) -> tuple[float, float, float]:
    """(decay, var of I, cov(I, dB)) with I = int e^{-lambda (dt - u)} dB_u over one step."""
    lam = config.market.lambda_
    if lam == 0:
        return 1.0, dt, dt
    decay = math.exp(-lam * dt)
    var = -math.expm1(-2 * lam * dt) / (2 * lam)
    cov = -math.expm1(-lam * dt) / lam
    return decay, var, cov


def correlated_step(config: ModelConfig, dt: float, z: np.ndarray):
    """(I, dB, dW) from three independent normal rows of ``z``; dW has correlation rho with dB."""
    decay, var, cov = ou_transition(config, dt)
    rho = config.market.rho
    dB = math.sqrt(dt) * z[0]
    I = cov / dt * dB + math.sqrt(max(var - cov**2 / dt, 0.0)) * z[1]
    dW = rho * dB + math.sqrt(max(1 - rho**2, 0.0) * dt) * z[2]
    return I, dB, dW


@dataclass(frozen=True)
class DriftPaths:
    times: np.ndarray
    mu: np.ndarray


def simulate_drift(config: ModelConfig, pathcfg: PathConfig, t_end: float | None = None,
                   mu0: float | None = None) -> DriftPaths:
    """Exact OU sampling on a dt grid; returns the full (n_paths, n_steps + 1) array."""
    mk = config.market
    t_end = config.T if t_end is None else t_end
    n_steps = max(1, round(t_end / pathcfg.dt))
    dt = t_end / n_steps
    decay, var, _ = ou_transition(config, dt)
    sd = mk.sigma_mu * math.sqrt(var)
    start = mk.mu0 if mu0 is None else mu0

    def run(rng, n):
        normals = _Normals(rng, n, pathcfg)
        mu = np.empty((n, n_steps + 1))
        mu[:, 0] = start
        z = normals(n_steps)
        for k in range(n_steps):
            mu[:, k + 1] = mk.mu_bar + (mu[:, k] - mk.mu_bar) * decay + sd * z[k]
        return mu

    return DriftPaths(np.linspace(0.0, t_end, n_steps + 1), np.vstack(_map_partitions(run, pathcfg)))


# ---------------------------------------------------------------------------
# stage two


@dataclass(frozen=True)
class PolicyTable:
    """Splines of log(N / (T - t)) and N_eta / N on a (t, eta) box."""

    iv: InteriorValue
    log_n: RectBivariateSpline
    ratio: RectBivariateSpline
    eta_lo: float
    eta_hi: float
    _etas: np.ndarray

    @classmethod
    def build(cls, iv: InteriorValue, t0: float, eta_lo: float, eta_hi: float, n_t: int = 401,
              n_eta: int = 161) -> PolicyTable:
        T = iv.config.T
        ts = np.linspace(t0, T, n_t)
        etas = np.linspace(eta_lo, eta_hi, n_eta)
        L = np.zeros((n_t, n_eta))
        R = np.zeros((n_t, n_eta))
        for i, t in enumerate(ts[:-1]):
            logN, r1, _ = iv.n_moments(float(t), etas)
            L[i] = logN - math.log(T - t)
            R[i] = r1
        return cls(iv, RectBivariateSpline(ts, etas, L), RectBivariateSpline(ts, etas, R), eta_lo, eta_hi, etas)

    def sliced(self, times: np.ndarray) -> SlicedTable:
        """Values and eta-derivatives at every simulation time, evaluated once."""
        tt = np.minimum(times, self.iv.config.T)
        nodes = self._etas
        h = nodes[1] - nodes[0]
        return SlicedTable(
            nodes=nodes,
            f=(self.log_n(tt, nodes), self.ratio(tt, nodes)),
            d=(self.log_n(tt, nodes, dy=1) * h, self.ratio(tt, nodes, dy=1) * h),
            log_tau=np.log(np.maximum(self.iv.config.T - tt, 1e-300)),
        )

    def __call__(self, t: float, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.sliced(np.array([t]))(0, eta)


@dataclass(frozen=True)
class SlicedTable:
    nodes: np.ndarray
    f: tuple[np.ndarray, np.ndarray]
    d: tuple[np.ndarray, np.ndarray]
    log_tau: np.ndarray

    def __call__(self, k: int, eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(log N, N_eta / N) at time index k by cubic Hermite in eta."""
        nodes = self.nodes
        e = np.clip(eta, nodes[0], nodes[-1])
        u = (e - nodes[0]) / (nodes[1] - nodes[0])
        j = np.minimum(u.astype(np.int64), nodes.size - 2)
        s = u - j
        s2 = s * s
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s2 * (3 - 2 * s)
        h11 = s2 * (s - 1)
        out = [h00 * f[k, j] + h10 * d[k, j] + h01 * f[k, j + 1] + h11 * d[k, j + 1]
               for f, d in zip(self.f, self.d)]
        return out[0] + self.log_tau[k], out[1]


@dataclass(frozen=True)
class Stage2Result:
    estimate: Estimate
    coarse: Estimate | None
    bias: float
    bias_stderr: float
    v_hat: float
    flagged: int
    min_surplus: np.ndarray
    min_c_minus_z: np.ndarray
    utilities: np.ndarray
    eta_clipped: int
    dt: float
    diagnostics: dict = field(default_factory=dict)

    def agrees(self, k: float = 3.0) -> bool:
        return self.estimate.within(self.v_hat, k, abs(self.bias))

    def to_dict(self) -> dict:
        return {"mean": self.estimate.mean, "stderr": self.estimate.stderr, "n": self.estimate.n,
                "dt": self.dt, "v_hat": self.v_hat, "dt_bias": self.bias, "dt_bias_stderr": self.bias_stderr,
                "flags": {"wealth_constraint": self.flagged, "eta_clipped": self.eta_clipped,
                          "c_le_z": int(np.sum(self.min_c_minus_z <= 0))}}


class SimulationError(RuntimeError):
    pass


# state rows per path system (fine = 0, coarse = 1)
_X, _Z, _MUH, _UTIL, _MINSUR, _MINCZ = range(6)


@numba.njit(cache=True, nogil=True, inline="always")
def _lookup(F, D, k, e, node0, hnode, M):
    u = (e - node0) / hnode
    if u < 0.0:
        u = 0.0
    if u > M - 1:
        u = M - 1.0
    j = min(int(u), M - 2)
    s = u - j
    s2 = s * s
    return ((1 + 2 * s) * (1 - s) ** 2 * F[k, j] + s * (1 - s) ** 2 * D[k, j]
            + s2 * (3 - 2 * s) * F[k, j + 1] + s2 * (s - 1) * D[k, j + 1])


@numba.njit(cache=True, nogil=True)
def _advance(st, alive, sys, i, k, h, mu_true, dW, check, kk, tarr, F0, D0, F1, D1, log_tau,
             node0, hnode, par):
    if not alive[sys, i]:
        return
    p, ss, lam, mb = par[0], par[1], par[2], par[3]
    m, gain, D, g, delta, alpha = tarr[0, k], tarr[1, k], tarr[2, k], tarr[3, k], tarr[4, k], tarr[5, k]
    x, z, muh = st[sys, _X, i], st[sys, _Z, i], st[sys, _MUH, i]
    M = F0.shape[1]
    y = x - m * z
    logN = _lookup(F0, D0, k, muh, node0, hnode, M) + log_tau[k]
    r1 = _lookup(F1, D1, k, muh, node0, hnode, M)
    cz = math.exp(math.log(y) - logN - g)
    c = z + cz
    pi = (muh / ((1 - p) * ss * ss) + D / (ss * ss) * r1) * y
    if cz < st[sys, _MINCZ, i]:
        st[sys, _MINCZ, i] = cz
    st[sys, _UTIL, i] += cz**p / p * h
    dWhat = ((mu_true - muh) * h + ss * dW) / ss
    x_new = x + (pi * muh - c) * h + ss * pi * dWhat
    z_new = z + (delta * c - alpha * z) * h
    st[sys, _X, i] = x_new
    st[sys, _Z, i] = z_new
    st[sys, _MUH, i] = muh - lam * (muh - mb) * h + gain * dWhat
    if check:
        surplus = x_new - tarr[0, kk] * z_new
        if surplus < st[sys, _MINSUR, i]:
            st[sys, _MINSUR, i] = surplus
        if not surplus > 0.0:
            alive[sys, i] = False


@numba.njit(cache=True, nogil=True)
def _stage2_block(k0, zs, st, alive, mu, mu_left, sum_dW, coarse, n_steps, tarr, F0, D0, F1, D1,
                  log_tau, node0, hnode, lo, hi, par):
    """Advance all paths of one partition through the steps covered by ``zs``; returns clip count."""
    dt, sdt, a_i, b_i, rho, c_w, decay, sm, mb = par[4], par[5], par[6], par[7], par[8], par[9], par[10], par[11], par[3]
    clipped = 0
    n = mu.size
    for kb in range(zs.shape[0]):
        k = k0 + kb
        check = k + 1 < n_steps
        for i in range(n):
            dB = sdt * zs[kb, 0, i]
            I = a_i * dB + b_i * zs[kb, 1, i]
            dW = rho * dB + c_w * zs[kb, 2, i]
            mh = st[0, _MUH, i]
            if mh < lo or mh > hi:
                clipped += 1
            _advance(st, alive, 0, i, k, dt, mu[i], dW, check, k + 1, tarr, F0, D0, F1, D1, log_tau,
                     node0, hnode, par)
            if coarse:
                if k % 2 == 0:
                    mu_left[i] = mu[i]
                    sum_dW[i] = dW
                else:
                    sum_dW[i] += dW
                    _advance(st, alive, 1, i, k - 1, 2 * dt, mu_left[i], sum_dW[i], check, k + 1, tarr,
                             F0, D0, F1, D1, log_tau, node0, hnode, par)
            mu[i] = mb + (mu[i] - mb) * decay + sm * I
    return clipped


def run_stage2(config: ModelConfig, start: dict, pathcfg: PathConfig, coarse: bool = True,
               table: PolicyTable | None = None) -> Stage2Result:
    """Simulate the optimally controlled stage two from ``start`` = {t, x, z, mu}.

    With ``coarse`` a second run at step 2 dt reuses the summed increments of
    the fine run; the difference of the two means estimates the dt-bias.
    Once a path crosses x = m(t) z it is frozen and flagged.
    """
    mk, hb, p = config.market, config.habit, config.pref.p
    T = config.T
    t0, x0, z0, mu_start = float(start["t"]), float(start["x"]), float(start["z"]), float(start["mu"])
    iv = build_interior(config, riccati_start=min(t0, T))
    m0 = float(subsistence_factor(config, t0))
    if x0 <= m0 * z0:
        raise ValueError("start violates x > m(t) z")
    v_hat = float(iv.value(t0, x0, z0, mu_start)) if t0 < T else 0.0
    n_steps = round((T - t0) / pathcfg.dt)
    if coarse and n_steps % 2:
        n_steps += 1
    if t0 >= T or n_steps == 0:
        zeros = np.zeros(pathcfg.n_paths)
        est = Estimate(0.0, 0.0, pathcfg.n_paths)
        return Stage2Result(est, est if coarse else None, 0.0, 0.0, 0.0, 0, zeros + (x0 - m0 * z0), zeros + np.inf,
                            zeros, 0, pathcfg.dt)
    dt = (T - t0) / n_steps
    riccati = riccati_explicit(config, t0)
    if table is None:
        W = 6 * mk.sigma_mu / math.sqrt(2 * mk.lambda_) if mk.lambda_ > 0 else 6 * mk.sigma_mu * math.sqrt(T)
        W = max(W, 1.0) + abs(mu_start - mk.mu_bar)
        table = PolicyTable.build(iv, t0, mk.mu_bar - W, mk.mu_bar + W)
    times = t0 + dt * np.arange(n_steps + 1)
    m_t = subsistence_factor(config, times)
    S_t = riccati(times)
    tarr = np.ascontiguousarray(np.vstack([
        m_t, filter_gain(config, S_t), S_t + mk.sigma_s * mk.sigma_mu * mk.rho,
        np.log1p(hb.delta(times) * m_t) / (1 - p), hb.delta(times), hb.alpha(times)]))
    sliced = table.sliced(times)
    F0, F1 = (np.ascontiguousarray(f) for f in sliced.f)
    D0, D1 = (np.ascontiguousarray(d) for d in sliced.d)
    decay, var, cov = ou_transition(config, dt)
    par = np.array([p, mk.sigma_s, mk.lambda_, mk.mu_bar, dt, math.sqrt(dt), cov / dt,
                    math.sqrt(max(var - cov**2 / dt, 0.0)), mk.rho, math.sqrt(max(1 - mk.rho**2, 0.0) * dt),
                    decay, mk.sigma_mu])
    nodes = sliced.nodes

    def run(rng, n):
        normals = _Normals(rng, n, pathcfg)
        st = np.empty((2, 6, n))
        st[:, _X], st[:, _Z], st[:, _MUH] = x0, z0, mu_start
        st[:, _UTIL], st[:, _MINSUR], st[:, _MINCZ] = 0.0, x0 - m0 * z0, np.inf
        alive = np.ones((2, n), dtype=bool)
        mu = np.full(n, mu_start)
        mu_left, sum_dW = mu.copy(), np.zeros(n)
        clipped = 0
        block = 256
        for b0 in range(0, n_steps, block):
            zs = np.ascontiguousarray(normals(3 * min(block, n_steps - b0)).reshape(-1, 3, n))
            clipped += _stage2_block(b0, zs, st, alive, mu, mu_left, sum_dW, coarse, n_steps, tarr, F0, D0,
                                     F1, D1, sliced.log_tau, nodes[0], nodes[1] - nodes[0], nodes[0],
                                     nodes[-1], par)
        return st, alive, clipped

    results = _map_partitions(run, pathcfg)
    util = np.concatenate([r[0][0, _UTIL] for r in results])
    flagged = int(sum(np.sum(~r[1][0]) for r in results))
    est = estimate(util, pathcfg)
    coarse_est, bias, bias_se = None, 0.0, 0.0
    if coarse:
        util_c = np.concatenate([r[0][1, _UTIL] for r in results])
        coarse_est = estimate(util_c, pathcfg)
        diff = estimate(util - util_c, pathcfg)
        bias, bias_se = diff.mean, diff.stderr
    res = Stage2Result(
        estimate=est, coarse=coarse_est, bias=bias, bias_stderr=bias_se, v_hat=v_hat, flagged=flagged,
        min_surplus=np.concatenate([r[0][0, _MINSUR] for r in results]),
        min_c_minus_z=np.concatenate([r[0][0, _MINCZ] for r in results]), utilities=util,
        eta_clipped=sum(r[2] for r in results), dt=dt)
    if flagged > 1e-3 * pathcfg.n_paths:
        raise SimulationError(f"{flagged} of {pathcfg.n_paths} paths crossed x = m(t) z; reduce dt")
    return res


def filter_variance_check(config: ModelConfig, pathcfg: PathConfig, check_times) -> list[dict]:
    """Cross-path variance of mu - mu_hat against the Riccati variance at ``check_times``."""
    mk = config.market
    T = config.T
    n_steps = round(T / pathcfg.dt)
    dt = T / n_steps
    riccati = riccati_explicit(config, 0.0)
    decay, _, _ = ou_transition(config, dt)
    idx = sorted({min(n_steps, round(t / dt)) for t in check_times})

    def run(rng, n):
        normals = _Normals(rng, n, pathcfg)
        mu = np.full(n, mk.mu0)
        mu_hat = mu.copy()
        out = {}
        for k in range(n_steps + 1):
            if k in idx:
                out[k] = mu - mu_hat
            if k == n_steps:
                break
            I, dB, dW = correlated_step(config, dt, normals(3)[:, :].reshape(3, n))
            dWhat = ((mu - mu_hat) * dt + mk.sigma_s * dW) / mk.sigma_s
            mu_hat = mu_hat - mk.lambda_ * (mu_hat - mk.mu_bar) * dt + filter_gain(config, riccati(k * dt)) * dWhat
            mu = mk.mu_bar + (mu - mk.mu_bar) * decay + mk.sigma_mu * I
        return out

    parts = _map_partitions(run, pathcfg)
    rows = []
    for k in idx:
        err = np.concatenate([p[k] for p in parts])
        var = float(np.var(err, ddof=1))
        se = var * math.sqrt(2.0 / (err.size - 1))
        target = float(riccati(k * dt))
        rows.append({"t": k * dt, "sample_var": var, "stderr": se, "riccati": target,
                     "ok": abs(var - target) <= 3 * se + 1e-15})
    return rows


# ---------------------------------------------------------------------------
# composite problem


@dataclass(frozen=True)
class FixedTimeRule:
    t_stop: float

    def __call__(self, t, eta):
        return np.broadcast_to(np.asarray(t) >= self.t_stop - 1e-12, np.shape(eta))


@dataclass(frozen=True)
class ImmediateRule:
    def __call__(self, t, eta):
        return np.ones(np.shape(eta), dtype=bool)


def model_reward(config: ModelConfig) -> Callable[[float, np.ndarray], np.ndarray]:
    """Psi(t, eta) = interior value at (t, x0 - kappa t, z0, eta) with the filter restarted at t."""
    return lambda t, eta: np.asarray(entry_value(config, t, np.asarray(eta, dtype=float)), dtype=float)


@dataclass(frozen=True)
class CompositeResult:
    estimate: Estimate
    tau: np.ndarray
    mu_tau: np.ndarray
    rewards: np.ndarray
    dt: float

    def to_dict(self) -> dict:
        return {**self.estimate.to_dict(), "dt": self.dt, "mean_tau": float(np.mean(self.tau)),
                "stopped_before_T": int(np.sum(self.tau < self.tau.max() - 1e-12)) if self.tau.size else 0}


def _stage1_paths(config: ModelConfig, pathcfg: PathConfig, rule, checkpoints=()):
    """Run drift paths until ``rule`` stops them; also record (t ^ tau, mu) at checkpoints."""
    mk = config.market
    T = config.T
    n_steps = max(1, round(T / pathcfg.dt))
    dt = T / n_steps
    decay, var, _ = ou_transition(config, dt)
    sd = mk.sigma_mu * math.sqrt(var)
    cps = [min(n_steps, round(c / dt)) for c in checkpoints]

    def run(rng, n):
        normals = _Normals(rng, n, pathcfg)
        mu = np.full(n, mk.mu0)
        tau_idx = np.full(n, -1)
        mu_tau = np.zeros(n)
        at_cp = np.zeros((len(cps), n, 2))
        for k in range(n_steps + 1):
            active = tau_idx < 0
            stop = active & np.asarray(rule(k * dt, mu), dtype=bool)
            if k == n_steps:
                stop = active
            tau_idx[stop] = k
            mu_tau[stop] = mu[stop]
            for c, kc in enumerate(cps):
                if kc == k:
                    live = tau_idx < 0
                    at_cp[c, :, 0] = np.where(live, k * dt, tau_idx * dt)
                    at_cp[c, :, 1] = np.where(live, mu, mu_tau)
            if k == n_steps:
                break
            mu = mk.mu_bar + (mu - mk.mu_bar) * decay + sd * normals(1)[0]
        return tau_idx, mu_tau, at_cp

    parts = _map_partitions(run, pathcfg)
    tau_idx = np.concatenate([p[0] for p in parts])
    mu_tau = np.concatenate([p[1] for p in parts])
    at_cp = np.concatenate([p[2] for p in parts], axis=1) if cps else np.zeros((0, tau_idx.size, 2))
    return tau_idx, mu_tau, at_cp, dt


def evaluate_reward(reward, times: np.ndarray, tau_idx: np.ndarray, mu_tau: np.ndarray, dt: float) -> np.ndarray:
    """Reward per path, grouped by stopping step so each distinct time is evaluated once."""
    out = np.empty(tau_idx.size)
    for k in np.unique(tau_idx):
        sel = tau_idx == k
        out[sel] = reward(float(times[k]) if times is not None else k * dt, mu_tau[sel])
    return out


def run_composite(config: ModelConfig, rule, pathcfg: PathConfig, reward=None,
                  nested: PathConfig | None = None) -> CompositeResult:
    """Estimate E[Psi(tau, mu_tau)] for a stopping rule on the full-information drift.

    ``reward`` defaults to the model obstacle.  With ``nested`` each stopped
    path's reward is replaced by one stage-two realized utility (costly).
    """
    reward = reward or model_reward(config)
    tau_idx, mu_tau, _, dt = _stage1_paths(config, pathcfg, rule)
    times = dt * np.arange(round(config.T / dt) + 1)
    if nested is None:
        rewards = evaluate_reward(reward, times, tau_idx, mu_tau, dt)
    else:
        rewards = np.empty(tau_idx.size)
        co, hb = config.cost, config.habit
        for i, (k, mu) in enumerate(zip(tau_idx, mu_tau)):
            t = float(times[k])
            sub = PathConfig(2 if nested.antithetic else 1, nested.dt, nested.seed + i, nested.antithetic)
            rewards[i] = run_stage2(config, {"t": t, "x": co.x0 - co.kappa * t, "z": hb.z0, "mu": mu},
                                    sub, coarse=False).estimate.mean
    return CompositeResult(estimate(rewards, pathcfg), times[tau_idx], mu_tau, rewards, dt)


@dataclass(frozen=True)
class MartingaleReport:
    checkpoints: list[float]
    means: list[Estimate]
    pairwise: list[tuple[float, float, float, float]]
    v0: float

    @property
    def flat(self) -> bool:
        return all(abs(d) <= 3 * se + 1e-15 for _, _, d, se in self.pairwise)

    def to_dict(self) -> dict:
        return {"v0": self.v0, "checkpoints": self.checkpoints, "means": [m.to_dict() for m in self.means],
                "pairwise": [{"t1": a, "t2": b, "diff": d, "stderr": s} for a, b, d, s in self.pairwise],
                "flat": self.flat}


def martingale_check(config: ModelConfig, sol: VISolution, pathcfg: PathConfig, checkpoints) -> MartingaleReport:
    """Means of v(t ^ tau*, mu_{t ^ tau*}) with common random numbers across checkpoints."""
    rule = entry_rule(sol)
    cps = [float(c) for c in checkpoints]
    _, _, at_cp, _ = _stage1_paths(config, pathcfg, rule, cps)
    vals = [bilinear(sol.grid, sol.value, at_cp[c, :, 0], at_cp[c, :, 1]) for c in range(len(cps))]
    means = [estimate(v, pathcfg) for v in vals]
    pairs = []
    for i in range(len(cps)):
        for j in range(i + 1, len(cps)):
            d = estimate(vals[i] - vals[j], pathcfg)
            pairs.append((cps[i], cps[j], d.mean, d.stderr))
    return MartingaleReport(cps, means, pairs, sol.value_at(0.0, config.market.mu0))


def deterministic_scan(config: ModelConfig, reward=None, n: int = 20_001) -> tuple[float, float]:
    """max over t of Psi(t, mu_det(t)) when sigma_mu = 0; returns (t*, value)."""
    mk = config.market
    reward = reward or model_reward(config)
    ts = np.linspace(0.0, config.T, n)
    mu = mk.mu_bar + (mk.mu0 - mk.mu_bar) * np.exp(-mk.lambda_ * ts)
    vals = np.array([float(np.asarray(reward(float(t), np.array([m])))[0]) for t, m in zip(ts, mu)])
    k = int(np.argmax(vals))
    return float(ts[k]), float(vals[k])
