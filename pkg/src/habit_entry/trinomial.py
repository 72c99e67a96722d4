"""Trinomial-lattice Snell envelope for an OU drift (independent check of the VI solver).

The lattice follows the usual mean-reverting construction: node spacing
h = sigma_mu sqrt(3 dt), centred at mu_bar, with branching probabilities
matching the conditional mean and variance of the OU increment.  Beyond
j_max = ceil(0.184 / (lambda dt)) the branching bends inward so the lattice
stays finite.  Values are computed on every lattice node at every step, so
the envelope can be read at any starting drift by interpolation.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .params import ModelConfig


def _probabilities(j: np.ndarray, M: float, j_max: int):
    jm = j * M
    pu = 1 / 6 + (jm**2 + jm) / 2
    pm = 2 / 3 - jm**2
    pd = 1 / 6 + (jm**2 - jm) / 2
    shift = np.zeros_like(j)
    top, bot = j == j_max, j == -j_max
    # top: branches to j, j-1, j-2
    pu = np.where(top, 7 / 6 + (jm**2 + 3 * jm) / 2, pu)
    pm = np.where(top, -1 / 3 - jm**2 - 2 * jm, pm)
    pd = np.where(top, 1 / 6 + (jm**2 + jm) / 2, pd)
    shift = np.where(top, -1, shift)
    # bottom: branches to j+2, j+1, j
    pu = np.where(bot, 1 / 6 + (jm**2 - jm) / 2, pu)
    pm = np.where(bot, -1 / 3 - jm**2 + 2 * jm, pm)
    pd = np.where(bot, 7 / 6 + (jm**2 - 3 * jm) / 2, pd)
    shift = np.where(bot, 1, shift)
    return pu, pm, pd, shift


def snell_envelope_trinomial(config: ModelConfig, obstacle: Callable[[float, np.ndarray], np.ndarray],
                             n_steps: int, terminal: Callable[[np.ndarray], np.ndarray] | None = None,
                             j_cap: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction V_i = max(Psi(t_i), E[V_{i+1}]) on the lattice.

    Returns (eta_nodes, V at t = 0).  ``terminal`` overrides Psi(T, .).
    ``j_cap`` bounds the lattice when lambda is small (edges then absorb by
    reflection of the branching, as at j_max).
    """
    mk = config.market
    T = config.T
    dt = T / n_steps
    if mk.sigma_mu <= 0:
        raise ValueError("trinomial lattice needs sigma_mu > 0")
    h = mk.sigma_mu * math.sqrt(3 * dt)
    M = -mk.lambda_ * dt
    j_max = math.ceil(0.184 / (mk.lambda_ * dt)) if mk.lambda_ > 0 else (j_cap or 10 * n_steps)
    if j_cap is not None:
        j_max = min(j_max, j_cap)
    j = np.arange(-j_max, j_max + 1)
    eta = mk.mu_bar + j * h
    pu, pm, pd, shift = _probabilities(j, M, j_max)
    centre = j + shift + j_max
    if terminal is None:
        v = np.asarray(obstacle(T, eta), dtype=float)
    else:
        v = np.asarray(terminal(eta), dtype=float)
    for i in range(n_steps - 1, -1, -1):
        cont = pu * v[centre + 1] + pm * v[centre] + pd * v[centre - 1]
        v = np.maximum(np.asarray(obstacle(i * dt, eta), dtype=float), cont)
    return eta, v


def snell_value_at(config: ModelConfig, obstacle, n_steps: int, eta0: float | None = None, **kw) -> float:
    eta, v = snell_envelope_trinomial(config, obstacle, n_steps, **kw)
    eta0 = config.market.mu0 if eta0 is None else eta0
    return float(np.interp(eta0, eta, v))
