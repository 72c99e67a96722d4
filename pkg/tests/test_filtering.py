"""Riccati variance and filter updates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from habit_entry.filtering import (DegenerateModelError, FilterState, filter_gain, filter_step, riccati_explicit,
                                   riccati_ode_oracle, riccati_ode_path, riccati_rhs, stationary_variance)
from habit_entry.params import figure1_config

_REL = 1e-6


class TestRiccati:
    def test_zero_at_start(self, fig1):
        for start in (0.0, 3.0, 12.0):
            assert riccati_explicit(fig1, start)(start) == 0.0

    def test_explicit_vs_rk4(self, fig1):
        path = riccati_explicit(fig1)
        for t in np.linspace(0.5, fig1.T, 10):
            ref = riccati_ode_oracle(fig1, 0.0, t, 1e-3)
            assert path(t) == pytest.approx(ref, rel=_REL)

    def test_restarted_path_is_shifted(self, fig1):
        a, b = riccati_explicit(fig1, 0.0), riccati_explicit(fig1, 4.0)
        np.testing.assert_allclose(b(4.0 + np.array([0.5, 2.0, 6.0])), a(np.array([0.5, 2.0, 6.0])), rtol=1e-14)

    def test_ode_path_matches_explicit(self, fig1):
        a, b = riccati_explicit(fig1, 2.0), riccati_ode_path(fig1, 2.0)
        t = np.linspace(2.0, fig1.T, 37)
        np.testing.assert_allclose(b(t), a(t), rtol=1e-8, atol=1e-14)

    def test_derivative_is_rhs(self, fig1):
        path = riccati_explicit(fig1)
        t, h = 3.0, 1e-5
        fd = (path(t + h) - path(t - h)) / (2 * h)
        assert path.derivative(t) == pytest.approx(fd, rel=1e-7)

    def test_stationary_limit(self, fig1):
        path = riccati_explicit(fig1)
        s = stationary_variance(fig1)
        assert riccati_rhs(fig1, s) == pytest.approx(0.0, abs=1e-14)
        assert path(1e4) == pytest.approx(s, rel=1e-12)

    @pytest.mark.parametrize("rho", [1.0, -1.0])
    def test_perfect_correlation_gives_zero(self, fig1, rho):
        path = riccati_explicit(fig1.with_param("rho", rho))
        assert np.max(np.abs(path(np.linspace(0, fig1.T, 50)))) <= 1e-14

    def test_no_information_raises(self, fig1):
        with pytest.raises(DegenerateModelError):
            riccati_explicit(fig1.with_param("sigma_mu", 0.0).with_param("lambda", 0.0))

    def test_no_overflow_far_out(self, fig1):
        path = riccati_explicit(fig1.with_param("sigma_s", 0.01))
        assert np.isfinite(path(fig1.T))

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(0.0, 2.0), sm=st.floats(0.01, 1.0), rho=st.floats(-0.99, 0.99), ss=st.floats(0.05, 1.0))
    def test_bounded_and_nonnegative(self, lam, sm, rho, ss):
        cfg = figure1_config(**{"lambda": lam, "sigma_mu": sm, "rho": rho, "sigma_s": ss})
        v = riccati_explicit(cfg)(np.linspace(0, cfg.T, 60))
        assert np.all(v >= 0)
        assert np.all(v <= stationary_variance(cfg) * (1 + 1e-12) + 1e-15)


class TestFilterStep:
    def test_gain(self, fig1):
        assert filter_gain(fig1, 0.0) == pytest.approx(0.5 * 0.4 * 0.2 / 0.5)

    def test_zero_innovation_is_mean_reversion(self, fig1):
        st = FilterState(mu_hat=1.0, sigma_hat=0.0, t=0.0)
        nxt = filter_step(st, fig1, 0.01, 0.0, riccati_explicit(fig1))
        assert nxt.mu_hat == pytest.approx(1.0 - 0.1 * 0.75 * 0.01)
        assert nxt.t == pytest.approx(0.01)
        assert nxt.sigma_hat == pytest.approx(riccati_explicit(fig1)(0.01))

    def test_vectorized(self, fig1):
        st = FilterState(mu_hat=np.zeros(3), sigma_hat=0.01, t=1.0)
        nxt = filter_step(st, fig1, 0.01, np.array([0.1, 0.0, -0.1]))
        assert nxt.mu_hat.shape == (3,)
        assert nxt.mu_hat[0] > nxt.mu_hat[1] > nxt.mu_hat[2]

    def test_rk4_variance_fallback(self, fig1):
        st = FilterState(0.0, 0.0, 0.0)
        nxt = filter_step(st, fig1, 0.01, 0.0)
        assert nxt.sigma_hat == pytest.approx(riccati_explicit(fig1)(0.01), rel=1e-8)

    def test_rejects_nonpositive_dt(self, fig1):
        with pytest.raises(ValueError):
            filter_step(FilterState(0.0, 0.0, 0.0), fig1, 0.0, 0.0)
