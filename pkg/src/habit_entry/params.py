"""Model constants, admissibility checks and derived scalars.

A :class:`ModelConfig` bundles four immutable groups:

    market  lambda, mu_bar, sigma_s, sigma_mu, rho, horizon_T, mu0
    habit   alpha(t), delta(t), z0
    pref    p  (power-utility exponent, p < 0)
    cost    kappa, x0

``alpha`` and ``delta`` are piecewise-constant functions of time.  A plain
float is accepted everywhere and promoted to a one-piece function.

JSON layout (unknown keys are rejected)::

    {"market": {"lambda": 0.1, "mu_bar": 0.25, "sigma_s": 0.5,
                "sigma_mu": 0.4, "rho": 0.2, "horizon_T": 12.5, "mu0": 0.25},
     "habit":  {"alpha": 0.04, "delta": 0.25, "z0": 0.5},
     "pref":   {"p": -1.0},
     "cost":   {"kappa": 5000.0, "x0": 1000000.0}}

A piecewise rate is written ``{"breakpoints": [4.0], "values": [0.2, 0.3]}``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised for malformed configuration documents or refused configs."""


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function on [0, inf).

    ``values[i]`` holds on ``[breakpoints[i-1], breakpoints[i])`` with the
    conventions ``breakpoints[-1] = 0`` and ``breakpoints[n] = inf``.
    """

    values: tuple[float, ...]
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        if len(self.values) != len(self.breakpoints) + 1:
            raise ConfigError("piecewise function needs len(values) == len(breakpoints) + 1")
        if any(b2 <= b1 for b1, b2 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ConfigError("breakpoints must be strictly increasing")
        if self.breakpoints and self.breakpoints[0] <= 0.0:
            raise ConfigError("breakpoints must be positive")

    @classmethod
    def constant(cls, value: float) -> PiecewiseConstant:
        return cls(values=(float(value),))

    @classmethod
    def coerce(cls, obj: Any) -> PiecewiseConstant:
        if isinstance(obj, PiecewiseConstant):
            return obj
        if isinstance(obj, dict):
            extra = set(obj) - {"values", "breakpoints"}
            if extra:
                raise ConfigError(f"unknown keys in piecewise function: {sorted(extra)}")
            return cls(values=tuple(obj["values"]), breakpoints=tuple(obj.get("breakpoints", ())))
        return cls.constant(float(obj))

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1

    def __call__(self, t):
        if self.is_constant:
            return np.full_like(np.asarray(t, dtype=float), self.values[0])[()]
        idx = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right")
        return np.asarray(self.values)[idx][()]

    def breaks_in(self, a: float, b: float) -> list[float]:
        return [x for x in self.breakpoints if a < x < b]

    def minimum(self, a: float, b: float) -> float:
        return min(float(self(x)) for x in [a, *self.breaks_in(a, b)])

    def to_json(self) -> Any:
        if self.is_constant:
            return self.values[0]
        return {"breakpoints": list(self.breakpoints), "values": list(self.values)}


@dataclass(frozen=True)
class MarketParams:
    lambda_: float
    mu_bar: float
    sigma_s: float
    sigma_mu: float
    rho: float
    horizon_T: float
    mu0: float


@dataclass(frozen=True)
class HabitParams:
    alpha: PiecewiseConstant
    delta: PiecewiseConstant
    z0: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", PiecewiseConstant.coerce(self.alpha))
        object.__setattr__(self, "delta", PiecewiseConstant.coerce(self.delta))


@dataclass(frozen=True)
class PreferenceParams:
    p: float


@dataclass(frozen=True)
class CostParams:
    kappa: float
    x0: float


# JSON key -> dataclass attribute, where they differ
_RENAMED = {"lambda": "lambda_"}
_GROUPS = {"market": MarketParams, "habit": HabitParams, "pref": PreferenceParams, "cost": CostParams}
SWEEPABLE = ("delta", "alpha", "z0", "kappa", "rho", "sigma_mu")


@dataclass(frozen=True)
class ModelConfig:
    market: MarketParams
    habit: HabitParams
    pref: PreferenceParams
    cost: CostParams

    @property
    def T(self) -> float:
        return self.market.horizon_T

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        unknown = set(doc) - set(_GROUPS)
        missing = set(_GROUPS) - set(doc)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if missing:
            raise ConfigError(f"missing top-level keys: {sorted(missing)}")
        groups = {}
        for name, kind in _GROUPS.items():
            sub = doc[name]
            if not isinstance(sub, dict):
                raise ConfigError(f"'{name}' must be an object")
            attrs = {f.name for f in dataclasses.fields(kind)}
            kwargs = {}
            for key, value in sub.items():
                attr = _RENAMED.get(key, key)
                if attr not in attrs:
                    raise ConfigError(f"unknown key '{name}.{key}'")
                kwargs[attr] = value
            absent = attrs - set(kwargs)
            if absent:
                keys = sorted({v: k for k, v in _RENAMED.items()}.get(a, a) for a in absent)
                raise ConfigError(f"missing keys in '{name}': {keys}")
            for attr in attrs - {"alpha", "delta"}:
                kwargs[attr] = float(kwargs[attr])
            groups[name] = kind(**kwargs)
        return cls(**groups)

    def to_dict(self) -> dict:
        inverse = {v: k for k, v in _RENAMED.items()}
        out: dict[str, dict] = {}
        for name in _GROUPS:
            group = getattr(self, name)
            out[name] = {}
            for f in dataclasses.fields(group):
                value = getattr(group, f.name)
                if isinstance(value, PiecewiseConstant):
                    value = value.to_json()
                out[name][inverse.get(f.name, f.name)] = value
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_param(self, name: str, value: float) -> ModelConfig:
        """Copy with one scalar parameter replaced (any group, JSON name)."""
        attr = _RENAMED.get(name, name)
        for group in _GROUPS:
            obj = getattr(self, group)
            if attr in {f.name for f in dataclasses.fields(obj)}:
                if attr in ("alpha", "delta"):
                    value = PiecewiseConstant.coerce(value)
                else:
                    value = float(value)
                return dataclasses.replace(self, **{group: dataclasses.replace(obj, **{attr: value})})
        raise ConfigError(f"unknown parameter '{name}'")


def load_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ModelConfig.from_dict(doc)


def figure1_config(**overrides: float) -> ModelConfig:
    """The parameter set of the published sensitivity figure.

    The figure does not state the initial drift; it is set to the long-run
    level ``mu_bar``.
    """
    cfg = ModelConfig(
        market=MarketParams(lambda_=0.1, mu_bar=0.25, sigma_s=0.5, sigma_mu=0.4, rho=0.2,
                            horizon_T=12.5, mu0=0.25),
        habit=HabitParams(alpha=0.04, delta=0.25, z0=0.5),
        pref=PreferenceParams(p=-1.0),
        cost=CostParams(kappa=5000.0, x0=1_000_000.0),
    )
    for name, value in overrides.items():
        cfg = cfg.with_param(name, value)
    return cfg


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    t: float | None = None
    severity: str = "error"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def errors(self) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.severity == "error")

    @property
    def warnings(self) -> tuple[Violation, ...]:
        return tuple(v for v in self.violations if v.severity == "warning")

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]

    def raise_if_invalid(self) -> None:
        if not self.ok:
            raise ConfigError("invalid configuration: " + "; ".join(v.message for v in self.errors))


def subsistence_factor(config: ModelConfig, t):
    """m(t) = int_t^T exp(int_t^s (delta - alpha) dv) ds, exact for step rates.

    Kept here (rather than in ``interior``) because the budget check needs it.
    """
    T = config.T
    alpha, delta = config.habit.alpha, config.habit.delta
    t = np.asarray(t, dtype=float)
    edges = sorted(set(alpha.breaks_in(0.0, T)) | set(delta.breaks_in(0.0, T)))
    knots = np.array([0.0, *edges, T])
    # m at each knot, backward: m(a) = (e^{r(b-a)} - 1)/r + e^{r(b-a)} m(b)
    m_knot = np.zeros(len(knots))
    rates = np.array([float(delta((a + b) / 2) - alpha((a + b) / 2)) for a, b in zip(knots[:-1], knots[1:])])
    for i in range(len(knots) - 2, -1, -1):
        m_knot[i] = _grow(rates[i], knots[i + 1] - knots[i]) + math.exp(rates[i] * (knots[i + 1] - knots[i])) * m_knot[i + 1]
    tc = np.clip(t, 0.0, T)
    piece = np.clip(np.searchsorted(knots, tc, side="right") - 1, 0, len(rates) - 1)
    r = rates[piece]
    h = knots[piece + 1] - tc
    return (_grow(r, h) + np.exp(r * h) * m_knot[piece + 1])[()]


def _grow(r, h):
    """(e^{r h} - 1)/r with the r -> 0 limit h, stable for small |r h|."""
    r = np.asarray(r, dtype=float)
    h = np.asarray(h, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(np.abs(r * h) > 1e-8, np.expm1(r * h) / np.where(r == 0, 1.0, r), h * (1 + 0.5 * r * h))
    return out[()]


def validate(config: ModelConfig) -> ValidationReport:
    """Collect every violated admissibility rule; an empty report means valid."""
    mk, hb, pr, co = config.market, config.habit, config.pref, config.cost
    out: list[Violation] = []

    def bad(code, msg, t=None, severity="error"):
        out.append(Violation(code, msg, t, severity))

    finite = [mk.lambda_, mk.mu_bar, mk.sigma_s, mk.sigma_mu, mk.rho, mk.horizon_T, mk.mu0,
              hb.z0, pr.p, co.kappa, co.x0, *hb.alpha.values, *hb.delta.values]
    if not all(math.isfinite(v) for v in finite):
        bad("nonfinite", "all parameters must be finite numbers")
        return ValidationReport(tuple(out))
    if mk.sigma_s <= 0:
        bad("sigma_s", "sigma_s must be > 0")
    if abs(mk.rho) > 1:
        bad("rho", "rho must lie in [-1, 1]")
    if mk.lambda_ < 0:
        bad("lambda", "lambda must be >= 0")
    if mk.horizon_T <= 0:
        bad("horizon_T", "horizon_T must be > 0")
    if mk.sigma_mu < 0:
        bad("sigma_mu", "sigma_mu must be >= 0")
    elif mk.sigma_mu == 0:
        bad("sigma_mu_degenerate", "degenerate: deterministic drift (sigma_mu = 0)", severity="warning")
    if mk.sigma_mu == 0 and mk.lambda_ == 0:
        bad("no_information", "no information dynamics: lambda and sigma_mu are both zero",
            severity="warning")
    if min(hb.alpha.values) < 0:
        bad("alpha", "alpha(t) must be >= 0")
    if min(hb.delta.values) < 0:
        bad("delta", "delta(t) must be >= 0")
    if hb.z0 < 0:
        bad("z0", "z0 must be >= 0")
    if not pr.p < 0:
        bad("p", "p must be < 0")
    if co.x0 <= 0:
        bad("x0", "x0 must be > 0")
    if co.kappa < 0:
        bad("kappa", "kappa must be >= 0")

    if mk.horizon_T > 0 and not any(v.code == "horizon_T" for v in out):
        T = mk.horizon_T
        ts = np.unique(np.concatenate([np.linspace(0.0, T, 10 * math.ceil(T) + 1), [0.0, T]]))
        m = subsistence_factor(config, ts)
        if np.any(np.diff(m) > 1e-12 * (1 + np.abs(m[:-1]))):
            bad("m_monotone", "m(t) is not nonincreasing on the check grid")
        slack = co.x0 - co.kappa * ts - hb.z0 * m
        fail = np.nonzero(slack <= 0)[0]
        if fail.size:
            t_bad = float(ts[fail[0]])
            bad("budget", f"budget infeasible: x0 - kappa*t <= z0*m(t) at t={t_bad:.6g}", t=t_bad)
    return ValidationReport(tuple(out))


def delta_constant(config: ModelConfig) -> float:
    """Discriminant of the auxiliary Riccati equation (bounded-solution test)."""
    mk, p = config.market, config.pref.p
    lam, rho, ss, sm = mk.lambda_, mk.rho, mk.sigma_s, mk.sigma_mu
    return lam**2 - 2 * lam * p * rho * sm / ((1 - p) * ss) - p * sm**2 / ((1 - p) * ss**2)


def bounded_solution_condition(config: ModelConfig) -> dict:
    d = delta_constant(config)
    return {"delta_value": d, "satisfied": bool(d > 0)}
