"""Closed-form interior value under habit formation and a filtered drift.

With Y = x - m(t) z the surplus over the subsistence cost,

    V(t, x, z, eta) = N(t, eta)^{1-p} Y^p / p,
    N(t, eta) = int_t^T (1 + delta(s) m(s))^{p/(p-1)} exp(A eta^2 + B eta + C) ds,

where A(t, s), B(t, s), C(t, s) come from five autonomous auxiliary Riccati
/ linear ODEs in (t, s) (functions a, b, l, w, g) mapped through the filter
variance S(t):

    A = a / ((1-p) d),  B = b / ((1-p) d),  d = 1 - 2 a S,
    C = [l + S b^2 / (2 d) - (1-p)/2 log d - p/2 log(1 - 2 w S) - p g] / (1-p).

The ``S b^2 / (2 d)`` term carries a factor 1/2 that is needed for C to solve
its ODE; :meth:`AbcCoefficients.C_unhalved` keeps the form without it for
residual reports.

Feedback controls:

    pi* = [eta / ((1-p) sigma_s^2) + (S + sigma_s sigma_mu rho) / sigma_s^2 * N_eta / N] Y
    c*  = z + Y / ((1 + delta m)^{1/(1-p)} N)

N, N_eta and N_eta_eta are evaluated by composite Gauss-Legendre quadrature
in log space (log-sum-exp), so tails where N underflows stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .filtering import DegenerateModelError, RiccatiPath, riccati_explicit
from .params import ModelConfig, subsistence_factor


class DomainError(ValueError):
    """Raised when (x, z) lies outside the open effective domain x > m(t) z."""


# ---------------------------------------------------------------------------
# quadrature


def gauss_legendre_panels(a: float, b: float, n_panels: int, order: int = 16,
                          breaks=(), grade: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of composite Gauss-Legendre on [a, b].

    ``breaks`` are extra panel edges (kinks of the integrand).  ``grade`` > 0
    splits the first panel geometrically toward ``a`` (halving each time).
    """
    if b <= a:
        return np.empty(0), np.empty(0)
    edges = np.linspace(a, b, n_panels + 1)
    if grade:
        first = edges[1] - a
        extra = a + first * 0.5 ** np.arange(1, grade + 1)
        edges = np.concatenate([edges, extra])
    edges = np.unique(np.concatenate([edges, [x for x in breaks if a < x < b]]))
    x, w = _leggauss(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    nodes = (lo + half * (x[None, :] + 1.0)).ravel()
    weights = (half * w[None, :]).ravel()
    return nodes, weights


_LEGGAUSS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _leggauss(order: int):
    if order not in _LEGGAUSS:
        _LEGGAUSS[order] = np.polynomial.legendre.leggauss(order)
    return _LEGGAUSS[order]


# ---------------------------------------------------------------------------
# subsistence cost


@dataclass(frozen=True)
class SubsistenceCost:
    config: ModelConfig

    def __call__(self, t):
        return subsistence_factor(self.config, t)

    def derivative(self, t):
        """m'(t) = -1 - (delta(t) - alpha(t)) m(t)."""
        hb = self.config.habit
        return -1.0 - (hb.delta(t) - hb.alpha(t)) * self(t)


def subsistence_cost(config: ModelConfig) -> SubsistenceCost:
    return SubsistenceCost(config)


# ---------------------------------------------------------------------------
# auxiliary ODEs


@dataclass(frozen=True)
class AuxOdeSolutions:
    """Explicit a, b, l, w, g on 0 <= t <= s <= T (functions of s - t only)."""

    p: float
    lam: float
    mu_bar: float
    sigma_s: float
    sigma_mu: float
    rho: float
    Delta: float
    xi: float
    xi1: float
    gamma1: float
    gamma2: float
    gamma3: float

    def _core(self, t, s):
        tau = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
        e = np.exp(-self.xi * tau)
        E = e * e
        den = (self.xi - self.gamma2) + (self.xi + self.gamma2) * E
        return tau, e, E, den

    def a(self, t, s):
        tau, e, E, den = self._core(t, s)
        return (self.gamma3 / 2 * (1 - E) / den)[()]

    def b(self, t, s):
        tau, e, E, den = self._core(t, s)
        return (self.gamma3 * self.lam * self.mu_bar * (1 - e) ** 2 / (self.xi * den))[()]

    def l(self, t, s):
        tau, e, E, den = self._core(t, s)
        xi, g2, g3 = self.xi, self.gamma2, self.gamma3
        q = (1 - self.p) / (1 - self.p + self.p * self.rho**2)  # sigma_mu^2 / gamma1
        lm2 = (self.lam * self.mu_bar) ** 2
        linear = (g3 * lm2 / (2 * xi**2) - q * g2 / 2) * tau
        rational = g3 * lm2 * ((xi + 2 * g2) * E - 4 * g2 * e + 2 * g2 - xi) / (2 * xi**3 * den)
        logpart = -q / 2 * (np.log(den / (2 * xi)) + xi * tau)
        return (linear + rational + logpart)[()]

    def _w_den(self, tau):
        ss, x1 = self.sigma_s, self.xi1
        c = self.lam * ss + self.rho * self.sigma_mu
        E1 = np.exp(-2 * x1 * tau)
        return E1, (ss * x1 + c) + (ss * x1 - c) * E1

    def w(self, t, s):
        tau = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
        E1, den1 = self._w_den(tau)
        return (-(1 - E1) / (2 * self.sigma_s * den1))[()]

    def g(self, t, s):
        tau, e, E, den = self._core(t, s)
        E1, den1 = self._w_den(tau)
        p, rho, ss = self.p, self.rho, self.sigma_s
        r = 1 - p + p * rho**2
        first = 0.5 * (np.log(den1 / (2 * ss * self.xi1)) + self.xi1 * tau)
        second = -(1 - p) * (1 - rho**2) / (2 * r) * (np.log(den / (2 * self.xi)) + self.xi * tau)
        lin = -rho**2 * self.lam * tau / (2 * r) - rho * self.sigma_mu * tau / (2 * r * ss)
        return (first + second + lin)[()]

    def all(self, t, s) -> np.ndarray:
        return np.stack([self.a(t, s), self.b(t, s), self.l(t, s), self.w(t, s), self.g(t, s)])


def aux_ode_solutions(config: ModelConfig) -> AuxOdeSolutions:
    mk, p = config.market, config.pref.p
    lam, rho, ss, sm = mk.lambda_, mk.rho, mk.sigma_s, mk.sigma_mu
    g1 = (1 - p + p * rho**2) / (1 - p) * sm**2
    g2 = -lam + p * rho * sm / ((1 - p) * ss)
    g3 = p / ((1 - p) * ss**2)
    Delta = lam**2 - 2 * lam * p * rho * sm / ((1 - p) * ss) - p * sm**2 / ((1 - p) * ss**2)
    if Delta <= 0:
        raise DegenerateModelError(f"bounded-solution condition fails (Delta = {Delta})")
    xi = math.sqrt(Delta)
    xi1 = math.sqrt((1 - rho**2) * sm**2 + (lam * ss + rho * sm) ** 2) / ss
    if xi == 0.0 or xi1 == 0.0:
        raise DegenerateModelError("degenerate constants: xi or xi1 vanishes")
    return AuxOdeSolutions(p=p, lam=lam, mu_bar=mk.mu_bar, sigma_s=ss, sigma_mu=sm, rho=rho,
                           Delta=Delta, xi=xi, xi1=xi1, gamma1=g1, gamma2=g2, gamma3=g3)


def aux_ode_rhs(config: ModelConfig, y: np.ndarray) -> np.ndarray:
    """Time derivative (in t) of (a, b, l, w, g); autonomous."""
    mk, p = config.market, config.pref.p
    lam, rho, ss, sm, mb = mk.lambda_, mk.rho, mk.sigma_s, mk.sigma_mu, mk.mu_bar
    a, b, l, w, g = y
    r = 1 - p + p * rho**2
    return np.stack([
        -2 * r / (1 - p) * sm**2 * a**2 + (2 * lam - 2 * p * rho * sm / ((1 - p) * ss)) * a
        - p / (2 * (1 - p) * ss**2),
        -2 * r / (1 - p) * sm**2 * a * b - 2 * lam * mb * a + (lam - p * rho * sm / ((1 - p) * ss)) * b,
        -sm**2 * a - r * sm**2 / (2 * (1 - p)) * b**2 - lam * mb * b,
        -2 * (1 - rho**2) * sm**2 * w**2 + 2 * (lam * ss + rho * sm) / ss * w + 1 / (2 * ss**2),
        sm**2 * (1 - rho**2) * (w - a),
    ])


def aux_ode_oracle(config: ModelConfig, t, s, n_steps: int = 10_000) -> np.ndarray:
    """Fixed-step RK4 from the terminal condition at s back to t, for arrays of pairs.

    Each pair uses step (s - t) / n_steps.  Returns shape (5, *broadcast(t, s)).
    """
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    h = (t - s) / n_steps
    y = np.zeros((5, *t.shape))
    for _ in range(n_steps):
        k1 = aux_ode_rhs(config, y)
        k2 = aux_ode_rhs(config, y + 0.5 * h * k1)
        k3 = aux_ode_rhs(config, y + 0.5 * h * k2)
        k4 = aux_ode_rhs(config, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return y


# ---------------------------------------------------------------------------
# A, B, C


@dataclass(frozen=True)
class AbcCoefficients:
    aux: AuxOdeSolutions
    riccati: RiccatiPath
    p: float

    def _parts(self, t, s, sigma=None):
        a, b, l, w, g = self.aux.all(t, s)
        S = self.riccati(t) if sigma is None else np.asarray(sigma, dtype=float)
        d = 1 - 2 * a * S
        # 0/0 = 0 convention: d is exactly 1 when a and S both vanish
        d = np.where((np.abs(a) < 1e-14) & (np.abs(S) < 1e-14), 1.0, d)
        dw = 1 - 2 * w * S
        if np.any(d <= 0) or np.any(dw <= 0):
            raise ArithmeticError("nonpositive log argument in C(t, s); p < 0 should exclude this")
        return a, b, l, w, g, S, d, dw

    def A(self, t, s, sigma=None):
        a, b, l, w, g, S, d, dw = self._parts(t, s, sigma)
        return (a / ((1 - self.p) * d))[()]

    def B(self, t, s, sigma=None):
        a, b, l, w, g, S, d, dw = self._parts(t, s, sigma)
        return (b / ((1 - self.p) * d))[()]

    def C(self, t, s, sigma=None):
        a, b, l, w, g, S, d, dw = self._parts(t, s, sigma)
        p = self.p
        return ((l + S * b**2 / (2 * d) - (1 - p) / 2 * np.log(d) - p / 2 * np.log(dw) - p * g) / (1 - p))[()]

    def C_unhalved(self, t, s, sigma=None):
        """C with S b^2 / d in place of S b^2 / (2 d); does not solve its ODE when b, S != 0."""
        a, b, l, w, g, S, d, dw = self._parts(t, s, sigma)
        p = self.p
        return ((l + S * b**2 / d - (1 - p) / 2 * np.log(d) - p / 2 * np.log(dw) - p * g) / (1 - p))[()]

    def all(self, t, s, sigma=None):
        a, b, l, w, g, S, d, dw = self._parts(t, s, sigma)
        p = self.p
        A = a / ((1 - p) * d)
        B = b / ((1 - p) * d)
        C = (l + S * b**2 / (2 * d) - (1 - p) / 2 * np.log(d) - p / 2 * np.log(dw) - p * g) / (1 - p)
        return A, B, C


def abc_from_aux(aux: AuxOdeSolutions, riccati: RiccatiPath, p: float) -> AbcCoefficients:
    if not p < 0:
        raise ValueError("p must be < 0")
    return AbcCoefficients(aux=aux, riccati=riccati, p=p)


def abc_ode_residuals(config: ModelConfig, abc: AbcCoefficients, t, s, h: float = 1e-5,
                      unhalved: bool = False) -> np.ndarray:
    """Residuals of the A, B, C ODEs by centered differences in t; shape (3, ...)."""
    mk, p = config.market, config.pref.p
    lam, ss, sm, rho, mb = mk.lambda_, mk.sigma_s, mk.sigma_mu, mk.rho, mk.mu_bar
    Cf = abc.C_unhalved if unhalved else abc.C
    A, B, C = abc.A(t, s), abc.B(t, s), Cf(t, s)
    dA = (abc.A(t + h, s) - abc.A(t - h, s)) / (2 * h)
    dB = (abc.B(t + h, s) - abc.B(t - h, s)) / (2 * h)
    dC = (Cf(t + h, s) - Cf(t - h, s)) / (2 * h)
    D = abc.riccati(t) + ss * sm * rho
    drift = -lam + p * D / (ss**2 * (1 - p))
    rA = dA + p / (2 * (1 - p) ** 2 * ss**2) + 2 * drift * A + 2 * D**2 / ss**2 * A**2
    rB = dB + drift * B + 2 * lam * mb * A + 2 * D**2 / ss**2 * A * B
    rC = dC + lam * mb * B + D**2 / (2 * ss**2) * (B**2 + 2 * A)
    return np.stack([rA, rB, rC])


# ---------------------------------------------------------------------------
# value function


@dataclass(frozen=True)
class QuadratureSettings:
    order: int = 16
    min_panels: int = 8
    panels_per_unit: float = 4.0
    grade: int = 0
    refine: int = 1

    def panels(self, span: float) -> int:
        return self.refine * max(self.min_panels, math.ceil(self.panels_per_unit * span))


@dataclass(frozen=True)
class InteriorValue:
    """Evaluators of N, V and the feedback controls for a given filter path."""

    config: ModelConfig
    riccati: RiccatiPath
    quadrature: QuadratureSettings = field(default_factory=QuadratureSettings)

    @cached_property
    def m(self) -> SubsistenceCost:
        return SubsistenceCost(self.config)

    @cached_property
    def aux(self) -> AuxOdeSolutions:
        return aux_ode_solutions(self.config)

    @cached_property
    def abc(self) -> AbcCoefficients:
        return abc_from_aux(self.aux, self.riccati, self.config.pref.p)

    def _breaks(self, t: float) -> list[float]:
        hb = self.config.habit
        return sorted(set(hb.alpha.breaks_in(t, self.config.T)) | set(hb.delta.breaks_in(t, self.config.T)))

    def log_source(self, s):
        """log (1 + delta(s) m(s))^{p/(p-1)}."""
        p = self.config.pref.p
        return p / (p - 1) * np.log1p(self.config.habit.delta(s) * self.m(s))

    def integrand_terms(self, t: float, sigma: float | None = None):
        """Quadrature nodes with log-weights and A, B, C at (t, node)."""
        T = self.config.T
        s, w = gauss_legendre_panels(t, T, self.quadrature.panels(T - t), self.quadrature.order,
                                     self._breaks(t), self.quadrature.grade)
        if s.size == 0:
            return s, s, s, s, s
        A, B, C = self.abc.all(t, s, self.riccati(t) if sigma is None else sigma)
        return s, np.log(w) + self.log_source(s), A, B, C

    def n_moments(self, t: float, eta, sigma: float | None = None):
        """(log N, N_eta / N, N_eta_eta / N) at fixed t for an array of eta."""
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        t = float(t)
        if t >= self.config.T:
            z = np.zeros_like(eta)
            return np.full_like(eta, -np.inf), z, z
        s, logw, A, B, C = self.integrand_terms(t, sigma)
        e = eta[:, None]
        lin = 2 * A[None, :] * e + B[None, :]
        expo = logw[None, :] + A[None, :] * e**2 + B[None, :] * e + C[None, :]
        logN = logsumexp(expo, axis=1)
        wts = np.exp(expo - logN[:, None])
        r1 = np.sum(wts * lin, axis=1)
        r2 = np.sum(wts * (2 * A[None, :] + lin**2), axis=1)
        return logN, r1, r2

    def n_value(self, t: float, eta):
        logN, _, _ = self.n_moments(t, eta)
        return _squeeze(np.exp(logN), eta)

    def n_eta(self, t: float, eta):
        logN, r1, _ = self.n_moments(t, eta)
        return _squeeze(np.exp(logN) * r1, eta)

    def n_eta_eta(self, t: float, eta):
        logN, _, r2 = self.n_moments(t, eta)
        return _squeeze(np.exp(logN) * r2, eta)

    def surplus(self, t: float, x, z):
        y = np.asarray(x, dtype=float) - self.m(t) * np.asarray(z, dtype=float)
        if np.any(y <= 0):
            raise DomainError("wealth below subsistence cost: x <= m(t) z")
        return y

    def value(self, t: float, x, z, eta):
        p = self.config.pref.p
        y = self.surplus(t, x, z)
        if t >= self.config.T:
            return _squeeze(np.zeros(np.broadcast(y, np.asarray(eta)).shape), eta)
        logN, _, _ = self.n_moments(t, eta)
        logN = logN.reshape(np.shape(eta)) if np.ndim(eta) else logN[0]
        return (np.exp(p * np.log(y) + (1 - p) * logN) / p)[()]

    def policies(self, t: float, x, z, eta) -> dict:
        mk, p = self.config.market, self.config.pref.p
        if t >= self.config.T:
            raise DomainError("feedback controls are defined for t < T")
        y = self.surplus(t, x, z)
        logN, r1, _ = self.n_moments(t, eta)
        shape = np.shape(eta)
        logN, r1 = (logN.reshape(shape), r1.reshape(shape)) if shape else (logN[0], r1[0])
        D = self.riccati(t) + mk.sigma_s * mk.sigma_mu * mk.rho
        pi = (np.asarray(eta) / ((1 - p) * mk.sigma_s**2) + D / mk.sigma_s**2 * r1) * y
        dm = self.config.habit.delta(t) * self.m(t)
        c = np.asarray(z, dtype=float) + np.exp(np.log(y) - logN - np.log1p(dm) / (1 - p))
        return {"pi_star": np.asarray(pi)[()], "c_star": np.asarray(c)[()]}

    # -- residual checks -------------------------------------------------

    def n_pde_residual(self, t: float, eta, h: float = 1e-4):
        """Residual of the linear PDE for N, with N_t by centered differences."""
        mk, p = self.config.market, self.config.pref.p
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        logN, r1, r2 = self.n_moments(t, eta)
        N = np.exp(logN)
        Nt = (self.n_value(t + h, eta) - self.n_value(t - h, eta)) / (2 * h)
        D = self.riccati(t) + mk.sigma_s * mk.sigma_mu * mk.rho
        src = np.exp(self.log_source(t))
        res = (Nt + p * eta**2 / (2 * (1 - p) ** 2 * mk.sigma_s**2) * N + D**2 / (2 * mk.sigma_s**2) * N * r2
               + src + (-mk.lambda_ * (eta - mk.mu_bar) + eta * D * p / ((1 - p) * mk.sigma_s**2)) * N * r1)
        return res, np.abs(Nt) + np.abs(N * r2) + src + np.abs(N * r1) + N

    def hjb_residual(self, t: float, x: float, z: float, eta: float, h: float = 1e-4) -> tuple[float, float]:
        """LHS of the interior HJB with the feedback optimizers substituted.

        Derivatives of V are analytic in N, N_eta, N_eta_eta; only N_t uses a
        centered difference.  Returns (residual, |V|).
        """
        mk, hb, p = self.config.market, self.config.habit, self.config.pref.p
        ss = mk.sigma_s
        m, dm = float(self.m(t)), float(self.m.derivative(t))
        delta, alpha = float(hb.delta(t)), float(hb.alpha(t))
        Y = x - m * z
        logN, r1, r2 = (float(v[0]) for v in self.n_moments(t, [eta]))
        N = math.exp(logN)
        Ne, Nee = N * r1, N * r2
        Nt = float((self.n_value(t + h, [eta])[0] - self.n_value(t - h, [eta])[0]) / (2 * h))
        D = float(self.riccati(t)) + ss * mk.sigma_mu * mk.rho

        V = Y**p * N ** (1 - p) / p
        Vx = Y ** (p - 1) * N ** (1 - p)
        Vz = -m * Vx
        Vxx = (p - 1) * Y ** (p - 2) * N ** (1 - p)
        Veta = Y**p / p * (1 - p) * N ** (-p) * Ne
        Vxeta = Y ** (p - 1) * (1 - p) * N ** (-p) * Ne
        Vetaeta = Y**p / p * (1 - p) * (N ** (-p) * Nee - p * N ** (-p - 1) * Ne**2)
        Vt = -dm * z * Y ** (p - 1) * N ** (1 - p) + Y**p / p * (1 - p) * N ** (-p) * Nt

        pol = self.policies(t, x, z, eta)
        pi, c = float(pol["pi_star"]), float(pol["c_star"])
        terms = [
            Vt, -alpha * z * Vz, -mk.lambda_ * (eta - mk.mu_bar) * Veta, D**2 / (2 * ss**2) * Vetaeta,
            -c * Vx, c * delta * Vz, (c - z) ** p / p,
            pi * eta * Vx, 0.5 * ss**2 * pi**2 * Vxx, Vxeta * D * pi,
        ]
        return math.fsum(terms), abs(V)


def _squeeze(arr, like):
    return float(np.asarray(arr).reshape(-1)[0]) if np.ndim(like) == 0 else np.asarray(arr).reshape(np.shape(like))


def build_interior(config: ModelConfig, riccati_start: float = 0.0,
                   quadrature: QuadratureSettings | None = None) -> InteriorValue:
    return InteriorValue(config=config, riccati=riccati_explicit(config, riccati_start),
                         quadrature=quadrature or QuadratureSettings())


def n_value(iv: InteriorValue, t: float, eta):
    return iv.n_value(t, eta)


def n_eta(iv: InteriorValue, t: float, eta):
    return iv.n_eta(t, eta)


def interior_value(iv: InteriorValue, t: float, x, z, eta):
    return iv.value(t, x, z, eta)


def feedback_policies(iv: InteriorValue, t: float, x, z, eta) -> dict:
    return iv.policies(t, x, z, eta)


def entry_value(config: ModelConfig, t: float, eta, iv_cache: dict | None = None):
    """V(t, x0 - kappa t, z0, eta) with the filter restarted at t (S(t) = 0)."""
    co, hb = config.cost, config.habit
    if t >= config.T:
        return np.zeros_like(np.asarray(eta, dtype=float))[()]
    iv = build_interior(config, riccati_start=t)
    return iv.value(t, co.x0 - co.kappa * t, hb.z0, eta)
