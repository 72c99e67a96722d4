"""Configuration parsing, validation and the subsistence factor m(t)."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from habit_entry.params import (ConfigError, ModelConfig, PiecewiseConstant, bounded_solution_condition,
                                figure1_config, load_config, subsistence_factor, validate)

_M_TOL = 1e-10


def _m_quad(cfg, t):
    """m(t) by nested adaptive quadrature (oracle)."""
    a, d = cfg.habit.alpha, cfg.habit.delta
    brk = sorted(set(a.breakpoints) | set(d.breakpoints))

    def inner(s):
        return quad(lambda v: float(d(v) - a(v)), t, s, points=[b for b in brk if t < b < s] or None)[0]

    pts = [b for b in brk if t < b < cfg.T] or None
    return quad(lambda s: math.exp(inner(s)), t, cfg.T, points=pts, epsabs=1e-13, epsrel=1e-13)[0]


class TestPiecewiseConstant:
    def test_constant_broadcasts(self):
        f = PiecewiseConstant.constant(0.3)
        assert f(2.0) == 0.3
        np.testing.assert_array_equal(f(np.array([0.0, 5.0])), [0.3, 0.3])

    def test_steps_are_right_continuous(self):
        f = PiecewiseConstant((0.1, 0.2, 0.4), (1.0, 2.0))
        np.testing.assert_array_equal(f(np.array([0.0, 0.999, 1.0, 1.5, 2.0, 9.0])), [0.1, 0.1, 0.2, 0.2, 0.4, 0.4])

    def test_rejects_bad_breakpoints(self):
        with pytest.raises(ConfigError):
            PiecewiseConstant((0.1, 0.2), (2.0, 1.0))
        with pytest.raises(ConfigError):
            PiecewiseConstant((0.1,), (1.0,))

    def test_coerce_dict_roundtrip(self):
        f = PiecewiseConstant.coerce({"breakpoints": [3.0], "values": [0.1, 0.2]})
        assert PiecewiseConstant.coerce(f.to_json()) == f


class TestConfigIO:
    def test_roundtrip_through_json(self, tmp_path, fig1):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(fig1.to_dict()))
        assert load_config(path) == fig1
        assert load_config(path).digest() == fig1.digest()

    def test_unknown_key_rejected(self, fig1):
        doc = fig1.to_dict()
        doc["market"]["gamma"] = 1.0
        with pytest.raises(ConfigError, match="unknown key"):
            ModelConfig.from_dict(doc)

    def test_missing_key_rejected(self, fig1):
        doc = fig1.to_dict()
        del doc["market"]["lambda"]
        with pytest.raises(ConfigError, match="lambda"):
            ModelConfig.from_dict(doc)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_with_param_uses_json_names(self, fig1):
        assert fig1.with_param("lambda", 0.3).market.lambda_ == 0.3
        assert fig1.with_param("delta", 0.5).habit.delta(0.0) == 0.5
        with pytest.raises(ConfigError):
            fig1.with_param("nope", 1.0)


class TestValidate:
    def test_figure1_is_valid(self, fig1):
        rep = validate(fig1)
        assert rep.ok and not rep.warnings

    @pytest.mark.parametrize("name,value,code", [
        ("p", 0.5, "p"), ("p", 0.0, "p"), ("rho", 1.5, "rho"), ("sigma_s", 0.0, "sigma_s"),
        ("lambda", -0.1, "lambda"), ("horizon_T", 0.0, "horizon_T"), ("alpha", -0.1, "alpha"),
        ("delta", -0.1, "delta"), ("z0", -1.0, "z0"), ("x0", 0.0, "x0"), ("kappa", -1.0, "kappa"),
    ])
    def test_single_violation(self, fig1, name, value, code):
        rep = validate(fig1.with_param(name, value))
        assert not rep.ok
        assert code in {v.code for v in rep.errors}
        with pytest.raises(ConfigError):
            rep.raise_if_invalid()

    def test_budget_infeasible(self, fig1):
        # x0 - kappa T < 0 at the horizon
        rep = validate(fig1.with_param("kappa", 1e5))
        assert "budget" in {v.code for v in rep.errors}
        bad = next(v for v in rep.errors if v.code == "budget")
        assert 0 < bad.t <= fig1.T

    def test_budget_from_habit(self, fig1):
        # m(0) ~ 33 years of habit at these rates
        rep = validate(fig1.with_param("z0", 1e6 / 20))
        assert "budget" in {v.code for v in rep.errors}

    def test_degenerate_drift_is_warning(self, fig1):
        rep = validate(fig1.with_param("sigma_mu", 0.0))
        assert rep.ok
        assert any("deterministic drift" in m for m in rep.messages())

    def test_no_information_warning(self, fig1):
        rep = validate(fig1.with_param("sigma_mu", 0.0).with_param("lambda", 0.0))
        assert "no_information" in {v.code for v in rep.warnings}

    def test_bounded_solution_condition(self, fig1):
        out = bounded_solution_condition(fig1)
        assert out["satisfied"] and out["delta_value"] > 0


class TestSubsistence:
    def test_terminal_zero(self, fig1):
        assert subsistence_factor(fig1, fig1.T) == 0.0

    def test_closed_form_constant_rates(self, fig1):
        r = 0.25 - 0.04
        t = np.linspace(0, fig1.T, 7)
        np.testing.assert_allclose(subsistence_factor(fig1, t), np.expm1(r * (fig1.T - t)) / r, rtol=1e-14)

    def test_equal_rates(self, fig1):
        cfg = fig1.with_param("alpha", 0.25)
        t = np.linspace(0, fig1.T, 5)
        np.testing.assert_allclose(subsistence_factor(cfg, t), fig1.T - t, rtol=1e-14)

    def test_against_quadrature(self, fig1):
        cfg = fig1.with_param("delta", {"breakpoints": [3.0, 8.0], "values": [0.1, 0.5, 0.02]})
        cfg = cfg.with_param("alpha", {"breakpoints": [5.0], "values": [0.04, 0.3]})
        for t in (0.0, 2.0, 3.0, 6.5, 8.0, 12.0):
            assert subsistence_factor(cfg, t) == pytest.approx(_m_quad(cfg, t), rel=_M_TOL)

    @settings(max_examples=40, deadline=None)
    @given(alpha=st.floats(0, 1), delta=st.floats(0, 1), T=st.floats(0.1, 30))
    def test_nonnegative_nonincreasing(self, alpha, delta, T):
        cfg = figure1_config(alpha=alpha, delta=delta, horizon_T=T)
        m = subsistence_factor(cfg, np.linspace(0, T, 50))
        assert np.all(m >= 0)
        assert np.all(np.diff(m) <= 1e-12 * (1 + m[:-1]))
