"""Diagnostics: Holder and sewing norms, rate fits, error decomposition, KS and the harnesses."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roughscheme.analysis import (
    SewingIncrement,
    clt_error_harness,
    error_decomposition,
    holder_seminorm,
    ks_two_sample,
    rate_fit,
    rate_harness,
    residual_harness,
    sewing_check,
    sewing_constant,
    sewing_norms,
    sup_error,
)
from roughscheme.constants import qp_sum
from roughscheme.fbm_core import LevyAreaF, levy_area_values, lift_increments, sample_increments
from roughscheme.fields import AdditiveField, RotationField
from roughscheme.schemes import Trajectory, jacobian_pair, modified_euler, reference_solution

H = 0.4


class TestHolder:
    def test_linear_path(self):
        t = np.linspace(0, 1, 65)
        assert holder_seminorm(t, 1.0) == pytest.approx(1.0)
        # (v - u)^{1/2} is largest for the full interval
        assert holder_seminorm(t, 0.5) == pytest.approx(1.0)

    def test_horizon_scaling(self):
        t = np.linspace(0, 1, 33)
        assert holder_seminorm(2 * t, 1.0, horizon_T=2.0) == pytest.approx(1.0)

    def test_single_jump(self):
        x = np.zeros(17)
        x[9:] = 1.0
        assert holder_seminorm(x, 0.4) == pytest.approx((1 / 16) ** -0.4)

    def test_vector_valued(self):
        x = np.zeros((5, 2))
        x[1:] = [3.0, 4.0]
        assert holder_seminorm(x, 1.0, horizon_T=4.0) == pytest.approx(5.0)

    def test_sparse_lags_lower_bound(self):
        x = np.random.default_rng(0).normal(size=2**13 + 1).cumsum()
        assert holder_seminorm(x, 0.5) >= np.abs(np.diff(x)).max() * (2**13) ** 0.5

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ValueError):
            holder_seminorm(np.arange(4.0), gamma)


def _quadratic_remainder(n):
    """R_st = (t-s)^2 - sum of squared steps in [s, t); delta R_sut = 2 (u-s)(t-u)."""
    t = np.linspace(0, 1, n + 1)
    s_, t_ = np.meshgrid(t, t, indexing="ij")
    steps = np.subtract.outer(np.arange(n + 1), np.arange(n + 1)).T / n**2
    r = np.triu((t_ - s_) ** 2 - steps, k=1)
    return SewingIncrement(n, r)


class TestSewing:
    def test_constant_at_two(self):
        # 4 * pi^2 / 6
        assert sewing_constant(2.0) == pytest.approx(2 * math.pi**2 / 3, rel=1e-12)
        assert sewing_constant(2.0) == pytest.approx(6.5797363, abs=1e-7)

    def test_constant_at_three_halves(self):
        assert sewing_constant(1.5) == pytest.approx(2**1.5 * 2.6123753486854883, rel=1e-12)

    @pytest.mark.parametrize("mu", [1.0, 0.5])
    def test_constant_diverges(self, mu):
        with pytest.raises(ValueError):
            sewing_constant(mu)

    def test_quadratic_example(self):
        inc = _quadratic_remainder(16)
        norm_r, norm_dr = sewing_norms(inc, 2.0)
        assert norm_dr == pytest.approx(0.5)
        assert norm_r == pytest.approx(1 - 1 / 16)
        assert sewing_check(inc, 2.0) <= 1.0

    def test_zero_increment(self):
        assert sewing_check(SewingIncrement(4, np.zeros((5, 5))), 1.5) == 0.0

    def test_must_vanish_on_steps(self):
        r = np.zeros((4, 4))
        r[1, 2] = 1.0
        with pytest.raises(ValueError):
            SewingIncrement(3, r)

    @settings(max_examples=40, deadline=None)
    @given(arrays(float, (9, 9), elements=st.floats(-1, 1)), st.floats(1.1, 3.0))
    def test_inequality_holds_for_any_remainder(self, raw, mu):
        r = np.triu(raw, k=2)
        if not np.any(r):
            return
        assert sewing_check(SewingIncrement(8, r), mu) <= 1.0 + 1e-12

    def test_vector_remainder(self):
        base = _quadratic_remainder(8).r
        inc = SewingIncrement(8, np.stack([3 * base, 4 * base], axis=-1))
        norm_r, norm_dr = sewing_norms(inc, 2.0)
        assert norm_dr == pytest.approx(2.5)


class TestRates:
    def test_sup_error(self):
        a = np.zeros((3, 5, 2))
        b = np.zeros((3, 5, 2))
        b[1, 2] = [3.0, 4.0]
        assert np.array_equal(sup_error(a, b), [0.0, 5.0, 0.0])
        assert sup_error(a[0], b[1]) == 5.0

    def test_sup_error_grid_mismatch(self):
        with pytest.raises(ValueError):
            sup_error(np.zeros((5, 2)), np.zeros((9, 2)))

    def test_synthetic_slope(self):
        ns = [2**k for k in range(6, 13)]
        rep = rate_fit(ns, [n**-0.3 for n in ns])
        assert rep.fitted_slope == pytest.approx(-0.3, abs=1e-12)
        assert rep.rate == pytest.approx(0.3, abs=1e-12)
        assert rep.slope_stderr < 1e-12

    def test_constant_errors(self):
        assert rate_fit([1, 2, 4, 8], [0.1] * 4).fitted_slope == pytest.approx(0.0, abs=1e-14)

    @given(st.floats(1e-6, 1e6))
    def test_scale_invariance(self, c):
        ns = [8, 16, 32, 64, 128]
        errs = [0.3, 0.2, 0.17, 0.09, 0.08]
        a = rate_fit(ns, errs).fitted_slope
        b = rate_fit(ns, [c * e for e in errs]).fitted_slope
        assert a == pytest.approx(b, abs=1e-9)

    @pytest.mark.parametrize("ns,errs", [([1, 2, 4], [1, 1, 1]), ([1, 2, 4, 8], [1, 1, 0, 1]), ([1, 2, 4, 8], [1, 1])])
    def test_invalid(self, ns, errs):
        with pytest.raises(ValueError):
            rate_fit(ns, errs)


def _decomposition(field, n=32, rho=32, reps=3):
    dx = sample_increments(H, n * rho, 1.0, field.dim_m, 5, range(reps))
    delta_b, bb = lift_increments(dx, rho)
    h = 1.0 / n
    y = reference_solution(dx, field, np.zeros(field.dim_d), n, horizon_T=1.0, check_gap=False).values
    yn = modified_euler(delta_b, h, H, field, np.zeros(field.dim_d)).values
    F = LevyAreaF(levy_area_values(bb, H, h), H, 1.0, n)
    jac = jacobian_pair(y, delta_b, h, H, field)
    jac_n = jacobian_pair(y, delta_b, h, H, field, y_other=yn)
    return error_decomposition(y, yn, jac_n, jac, F, field)


class TestDecomposition:
    def test_additive_field_is_exact(self):
        dec = _decomposition(AdditiveField([[1.0, 0.5], [0.0, 2.0]], b=[0.3, -0.1]))
        assert np.max(np.abs(dec.epsilon)) < 1e-12
        assert np.max(np.abs(dec.epsilon_hat)) == 0.0

    def test_additivity(self):
        dec = _decomposition(RotationField())
        assert np.allclose(dec.epsilon_hat + dec.epsilon_tilde, dec.epsilon, rtol=0, atol=1e-15)
        assert np.all(dec.epsilon[..., 0, :] == 0) and np.all(dec.epsilon_hat[..., 0, :] == 0)
        assert dec.scale == pytest.approx(32 ** (2 * H - 0.5))

    def test_grid_mismatch(self):
        dec_inputs = np.zeros((9, 2))
        jac = jacobian_pair(dec_inputs, np.zeros((8, 2)), 0.1, H, RotationField())
        F = LevyAreaF(np.zeros((5, 2, 2)), H, 1.0, 4)
        with pytest.raises(ValueError):
            error_decomposition(dec_inputs, dec_inputs, jac, jac, F, RotationField())


class TestKS:
    def test_identical(self):
        x = np.random.default_rng(1).normal(size=100)
        assert ks_two_sample(x, x) == 0.0

    def test_disjoint(self):
        assert ks_two_sample(np.arange(10), np.arange(10) + 100) == 1.0

    @given(arrays(float, st.integers(1, 30), elements=st.floats(-1e3, 1e3)),
           arrays(float, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
    @pytest.mark.filterwarnings("ignore:ks_2samp")
    def test_symmetric_and_bounded(self, x, y):
        d = ks_two_sample(x, y)
        assert d == ks_two_sample(y, x)
        assert 0.0 <= d <= 1.0

    def test_monotone_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=200), rng.normal(0.2, size=300)
        assert ks_two_sample(np.exp(x), np.exp(y)) == pytest.approx(ks_two_sample(x, y), abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_two_sample([], [1.0])

    def test_same_law_below_critical_value(self):
        # the 5% critical value for two samples of 2000 is 1.358 sqrt(2/2000) = 0.0429
        rng = np.random.default_rng(3)
        hits = sum(ks_two_sample(rng.normal(size=2000), rng.normal(size=2000)) < 0.061 for _ in range(100))
        assert hits >= 95


class TestHarnesses:
    def test_rate_independent_of_chunking(self):
        kw = dict(hurst=H, ns=[8, 16, 32, 64], reps=5, refinement=32, seed=4)
        a = rate_harness(RotationField(), chunk=2, **kw)
        b = rate_harness(RotationField(), chunk=5, **kw)
        for s in ("modified", "classical"):
            assert np.array_equal(a.errors[s], b.errors[s])
        assert np.array_equal(a.gaps, b.gaps)
        assert list(a.rows()) == list(b.rows())

    def test_rate_rows(self):
        res = rate_harness(RotationField(), hurst=H, ns=[8, 16, 32, 64], reps=3, refinement=32, schemes=("modified",))
        rows = list(res.rows())
        assert len(rows) == 4 and rows[0][:3] == ("modified", 8, H)
        assert res.gate_ratio("modified") > 0

    def test_rate_grid_must_divide(self):
        with pytest.raises(ValueError):
            rate_harness(RotationField(), ns=[8, 12, 16, 24], reps=1, refinement=33)

    def test_residual_shrinks(self):
        res = residual_harness(RotationField(), hurst=H, ns=(2**5, 2**7, 2**9), reps=16, refinement=32, seed=1)
        med = res.medians("tilde")
        assert med[-1] < med[0]
        assert np.all(res.scaled_tilde >= 0)

    def test_clt_degenerate_field(self):
        field = AdditiveField([[1.0, 0.0], [0.0, 1.0]])
        table = qp_sum(0.45)
        rep = clt_error_harness(field, table, hurst=0.45, n=16, reps=20, refinement=32, chunk=7)
        # constant coefficients: the scheme is exact and so is the limit
        assert np.max(np.abs(rep.errors)) < 1e-12 and np.max(np.abs(rep.limits)) < 1e-12
        assert set(rep.summary()) >= {"ks", "mean_gap", "variance_gap"}

    def test_clt_table_mismatch(self):
        with pytest.raises(ValueError):
            clt_error_harness(RotationField(), qp_sum(0.4), hurst=0.45)

    @pytest.mark.slow
    def test_wong_zakai_rate(self):
        # the product approximation still converges, at least like n^{-(H - 1/3)}
        res = rate_harness(RotationField(), hurst=H, ns=[2**k for k in range(5, 10)], reps=100,
                           refinement=32, schemes=("wong_zakai",), seed=11)
        assert res.reports["wong_zakai"].rate >= H - 1 / 3
