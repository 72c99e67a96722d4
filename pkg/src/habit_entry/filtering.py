"""Kalman-Bucy filter for an Ornstein-Uhlenbeck drift observed through prices.

The conditional variance solves the scalar Riccati equation

    dS/dt = -S^2 / sigma_s^2 - 2 (lambda + sigma_mu rho / sigma_s) S + (1 - rho^2) sigma_mu^2

started from S(start) = 0 (stage two begins with the drift known exactly).
With u = t - start and

    k  = lambda^2 sigma_s^2 + 2 sigma_s sigma_mu lambda rho + sigma_mu^2
    k1 = sqrt(k) sigma_s + (lambda sigma_s^2 + sigma_s sigma_mu rho)
    k2 = -sqrt(k) sigma_s + (lambda sigma_s^2 + sigma_s sigma_mu rho)

the solution is

    S = sqrt(k) sigma_s (k1 e^{2 sqrt(k) u / sigma_s} + k2) / (k1 e^{...} - k2)
        - (lambda + sigma_mu rho / sigma_s) sigma_s^2,

which vanishes at u = 0 because k1 + k2 and k1 - k2 reduce the ratio to
(lambda sigma_s^2 + sigma_s sigma_mu rho) / (sqrt(k) sigma_s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .params import ModelConfig


class DegenerateModelError(ValueError):
    """Raised when constants make a closed form undefined."""


def riccati_rhs(config: ModelConfig, sigma):
    mk = config.market
    ss, sm, rho, lam = mk.sigma_s, mk.sigma_mu, mk.rho, mk.lambda_
    return -sigma**2 / ss**2 + (-2 * sm * rho / ss - 2 * lam) * sigma + (1 - rho**2) * sm**2


def stationary_variance(config: ModelConfig) -> float:
    """Positive root of the Riccati right-hand side."""
    mk = config.market
    beta = mk.lambda_ + mk.sigma_mu * mk.rho / mk.sigma_s
    return mk.sigma_s * math.sqrt(_k(config)) - beta * mk.sigma_s**2


def _k(config: ModelConfig) -> float:
    mk = config.market
    return mk.lambda_**2 * mk.sigma_s**2 + 2 * mk.sigma_s * mk.sigma_mu * mk.lambda_ * mk.rho + mk.sigma_mu**2


@dataclass(frozen=True)
class RiccatiPath:
    """Conditional variance on [start_time, T] with value 0 at start_time.

    ``method`` is ``"explicit"`` (closed form) or ``"ode"`` (cached RK4 grid
    with Hermite interpolation).  Both are exposed so each can check the other.
    """

    start_time: float
    horizon: float
    k: float
    k1: float
    k2: float
    sigma_s: float
    beta: float
    method: str = "explicit"
    config: ModelConfig | None = None
    _grid: tuple | None = None

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.method == "ode":
            knots, spline = self._grid
            return spline(np.clip(t, knots[0], knots[-1]))[()]
        u = t - self.start_time
        rk = math.sqrt(self.k)
        decay = np.exp(-2.0 * rk / self.sigma_s * np.maximum(u, 0.0))
        # same ratio as (k1 e^x + k2)/(k1 e^x - k2), rewritten to avoid overflow
        ratio = (self.k1 + self.k2 * decay) / (self.k1 - self.k2 * decay)
        out = rk * self.sigma_s * ratio - self.beta * self.sigma_s**2
        return np.where(u <= 0.0, 0.0, np.maximum(out, 0.0))[()]

    def derivative(self, t):
        if self.config is None:
            raise ValueError("path built without a config")
        return riccati_rhs(self.config, self(t))

    @property
    def stationary_value(self) -> float:
        return self.sigma_s * math.sqrt(self.k) - self.beta * self.sigma_s**2


def _constants(config: ModelConfig) -> tuple[float, float, float, float]:
    mk = config.market
    k = _k(config)
    if k <= 0.0:
        raise DegenerateModelError("no information dynamics: lambda and sigma_mu are both zero")
    shift = mk.lambda_ * mk.sigma_s**2 + mk.sigma_s * mk.sigma_mu * mk.rho
    k1 = math.sqrt(k) * mk.sigma_s + shift
    k2 = -math.sqrt(k) * mk.sigma_s + shift
    beta = mk.lambda_ + mk.sigma_mu * mk.rho / mk.sigma_s
    return k, k1, k2, beta


def riccati_explicit(config: ModelConfig, start_time: float = 0.0) -> RiccatiPath:
    if not 0.0 <= start_time <= config.T:
        raise ValueError(f"start_time {start_time} outside [0, T]")
    k, k1, k2, beta = _constants(config)
    return RiccatiPath(start_time=float(start_time), horizon=config.T, k=k, k1=k1, k2=k2,
                       sigma_s=config.market.sigma_s, beta=beta, method="explicit", config=config)


def riccati_ode_path(config: ModelConfig, start_time: float = 0.0, n_points: int = 2000) -> RiccatiPath:
    """RK4-integrated variance cached on ``n_points`` knots over [start, T]."""
    if not 0.0 <= start_time <= config.T:
        raise ValueError(f"start_time {start_time} outside [0, T]")
    k, k1, k2, beta = _constants(config)
    T = config.T
    span = max(T - start_time, 1e-12)
    knots = start_time + span * np.linspace(0.0, 1.0, n_points)
    values = np.empty(n_points)
    values[0] = 0.0
    substeps = 8
    for i in range(1, n_points):
        values[i] = _rk4_scalar(config, values[i - 1], knots[i] - knots[i - 1], substeps)
    spline = CubicHermiteSpline(knots, values, riccati_rhs(config, values))
    return RiccatiPath(start_time=float(start_time), horizon=T, k=k, k1=k1, k2=k2,
                       sigma_s=config.market.sigma_s, beta=beta, method="ode", config=config,
                       _grid=(knots, spline))


def _rk4_scalar(config: ModelConfig, y: float, span: float, n: int) -> float:
    h = span / n
    for _ in range(n):
        f1 = riccati_rhs(config, y)
        f2 = riccati_rhs(config, y + 0.5 * h * f1)
        f3 = riccati_rhs(config, y + 0.5 * h * f2)
        f4 = riccati_rhs(config, y + h * f3)
        y = y + h * (f1 + 2 * f2 + 2 * f3 + f4) / 6.0
    return y


def riccati_ode_oracle(config: ModelConfig, start_time: float, t: float, step: float) -> float:
    """Fixed-step classical RK4 from S(start_time) = 0 to ``t``."""
    if step <= 0:
        raise ValueError("step must be positive")
    span = t - start_time
    if span < 0:
        raise ValueError("t must not precede start_time")
    if span == 0:
        return 0.0
    n = max(1, math.ceil(span / step - 1e-9))
    return _rk4_scalar(config, 0.0, span, n)


@dataclass(frozen=True)
class FilterState:
    mu_hat: float
    sigma_hat: float
    t: float


def filter_gain(config: ModelConfig, sigma_hat):
    mk = config.market
    return (sigma_hat + mk.sigma_s * mk.sigma_mu * mk.rho) / mk.sigma_s


def filter_step(state: FilterState, config: ModelConfig, dt: float, innovation_increment,
                riccati: RiccatiPath | None = None) -> FilterState:
    """One Euler-Maruyama step of the filter mean; the variance follows ``riccati``.

    ``innovation_increment`` may be an array (one entry per path); ``mu_hat``
    then broadcasts.  Without a path the variance is advanced by one RK4 step.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    mk = config.market
    mu_hat = np.asarray(state.mu_hat, dtype=float)
    gain = filter_gain(config, state.sigma_hat)
    new_mu = mu_hat - mk.lambda_ * (mu_hat - mk.mu_bar) * dt + gain * np.asarray(innovation_increment)
    t_new = state.t + dt
    if riccati is not None:
        sigma_new = float(riccati(t_new))
    else:
        sigma_new = _rk4_scalar(config, state.sigma_hat, dt, 1)
    return FilterState(mu_hat=new_mu[()], sigma_hat=sigma_new, t=t_new)
