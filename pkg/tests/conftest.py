from __future__ import annotations

import numpy as np
import pytest

from habit_entry.params import figure1_config

MU_BAR = 0.25


def synthetic_obstacle(t, eta, width=0.3, cost=0.05):
    """Nondegenerate test obstacle: a well at mu_bar plus a linear waiting cost."""
    return -np.exp(-(np.asarray(eta) - MU_BAR) ** 2 / (2 * width**2)) - cost * t


@pytest.fixture(scope="session")
def fig1():
    return figure1_config()


def bump_reward(t, eta, width=0.3, cost=0.05):
    """Positive reward peaked at mu_bar; with mu0 above mu_bar the best entry time is interior."""
    return np.exp(-(np.asarray(eta) - MU_BAR) ** 2 / (2 * width**2)) - cost * t


@pytest.fixture(scope="session")
def synthetic_solution(fig1):
    from habit_entry.vi_solver import Grid2D, obstacle_from_function, solve_vi

    grid = Grid2D.uniform(fig1.T, 201, MU_BAR - 4, MU_BAR + 4, 201)
    return solve_vi(fig1, grid, obstacle_from_function(grid, synthetic_obstacle, "synthetic"))


ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
