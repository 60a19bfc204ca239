"""Study-level DSM computation.

The hand-formula oracle recomputes everything from scratch with libm's
lgamma; Monte Carlo oracles draw raw normal samples and standardize them
directly, independent of the package's sampling code.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsmeta.effects import (
    ArmSummary,
    MomentPair,
    NORMAL_MOMENTS,
    asymptotic_variance,
    standardized_mean,
    study_dsm,
    study_from_g,
    var_g_hat,
    var_g_true,
)

# mpmath, 30 digits
J_19 = 0.9599103529242536
VAR_G_20_0 = 0.05149155831580040
VAR_G_20_1 = 0.08132272463180846
VAR_G_HAT_20_05 = 0.05724176139053997


def j_libm(m: float) -> float:
    return math.exp(math.lgamma(m / 2) - 0.5 * math.log(m / 2) - math.lgamma((m - 1) / 2))


def sample_g(rng, n, delta, size):
    """Raw-data oracle: normal samples -> mean/sd -> corrected g."""
    x = rng.normal(delta, 1.0, (size, n))
    d = x.mean(axis=1) / x.std(axis=1, ddof=1)
    return j_libm(n - 1) * d


class TestArmSummary:
    def test_rejects_small_arms(self):
        with pytest.raises(ValueError):
            ArmSummary(n=3, mean=0.0, sd=1.0)

    def test_rejects_zero_sd(self):
        with pytest.raises(ValueError):
            ArmSummary(n=10, mean=0.0, sd=0.0)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            ArmSummary(n=10, mean=math.nan, sd=1.0)


class TestStandardizedMean:
    def test_zero_mean(self):
        d, g = standardized_mean(ArmSummary(n=12, mean=0.0, sd=2.0))
        assert d == 0.0 and g == 0.0

    def test_hand_value(self):
        d, g = standardized_mean(ArmSummary(n=20, mean=1.0, sd=2.0))
        assert d == pytest.approx(0.5)
        assert g == pytest.approx(J_19 * 0.5, abs=1e-12)
        assert abs(g) < abs(d)

    def test_odd_in_mean(self):
        _, g_pos = standardized_mean(ArmSummary(n=15, mean=1.3, sd=0.7))
        _, g_neg = standardized_mean(ArmSummary(n=15, mean=-1.3, sd=0.7))
        assert g_pos == -g_neg

    def test_monte_carlo_unbiasedness(self):
        rng = np.random.default_rng(101)
        g = sample_g(rng, n=20, delta=1.0, size=200_000)
        se = g.std() / math.sqrt(g.size)
        assert float(g.mean()) == pytest.approx(1.0, abs=3 * se)


class TestVarGTrue:
    def test_null_value(self):
        assert var_g_true(20, 0.0) == pytest.approx(VAR_G_20_0, abs=1e-12)

    def test_nonnull_value(self):
        assert var_g_true(20, 1.0) == pytest.approx(VAR_G_20_1, abs=1e-12)

    def test_large_n_limit(self):
        assert var_g_true(100_000, 0.0) == pytest.approx(1e-5, rel=0.01)

    def test_monte_carlo_variance(self):
        rng = np.random.default_rng(202)
        for delta in (0.0, 1.0):
            g = sample_g(rng, n=20, delta=delta, size=200_000)
            assert float(g.var()) == pytest.approx(var_g_true(20, delta), rel=0.02)

    def test_domain(self):
        with pytest.raises(ValueError):
            var_g_true(3, 0.0)


class TestVarGHat:
    def test_zero_g(self):
        assert var_g_hat(25, 0.0) == 0.04

    def test_hand_value(self):
        assert var_g_hat(20, 0.5) == pytest.approx(VAR_G_HAT_20_05, abs=1e-12)

    def test_floor_and_even_monotone(self):
        for g in (0.0, 0.3, -0.3, 1.7):
            assert var_g_hat(18, g) >= 1.0 / 18
            assert var_g_hat(18, g) == var_g_hat(18, -g)
        gs = np.linspace(0.0, 3.0, 25)
        vals = [var_g_hat(18, float(g)) for g in gs]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_monte_carlo_unbiasedness(self):
        rng = np.random.default_rng(303)
        g = sample_g(rng, n=20, delta=1.0, size=200_000)
        estimates = np.array([var_g_hat(20, float(v)) for v in g[:100_000]])
        se = estimates.std() / math.sqrt(estimates.size)
        assert float(estimates.mean()) == pytest.approx(var_g_true(20, 1.0), abs=3 * se)

    @pytest.mark.parametrize("n", [10, 20, 100])
    @pytest.mark.parametrize("delta", [0.0, 1.0, 2.5])
    def test_unbiasedness_grid(self, n, delta):
        rng = np.random.default_rng(1000 + n + int(10 * delta))
        g = sample_g(rng, n=n, delta=delta, size=100_000)
        estimates = 1.0 / n + (1.0 - (n - 3) / ((n - 1) * j_libm(n - 1) ** 2)) * g**2
        se = estimates.std() / math.sqrt(estimates.size)
        assert float(estimates.mean()) == pytest.approx(var_g_true(n, delta), abs=3 * se)


class TestStudyDsm:
    def test_identical_arms(self):
        arm = ArmSummary(n=24, mean=1.1, sd=0.9)
        s = study_dsm(arm, arm)
        assert s.d_hat == 0.0
        assert s.v2_hat == pytest.approx(2 * var_g_hat(24, standardized_mean(arm)[1]), abs=1e-15)

    def test_zero_means_give_effective_size_floor(self):
        t = ArmSummary(n=20, mean=0.0, sd=1.0)
        c = ArmSummary(n=20, mean=0.0, sd=2.0)
        s = study_dsm(t, c)
        assert s.n_tilde == 10.0
        assert s.v2_hat == pytest.approx(0.1, abs=1e-15)

    def test_hand_formula_oracle(self):
        # recompute from scratch: d -> g -> per-arm variance -> totals
        t = ArmSummary(n=30, mean=2.0, sd=1.5)
        c = ArmSummary(n=20, mean=1.0, sd=2.0)
        s = study_dsm(t, c)
        g_t = j_libm(29) * (2.0 / 1.5)
        g_c = j_libm(19) * (1.0 / 2.0)
        n_tilde = 30 * 20 / 50
        v2 = (
            1.0 / n_tilde
            + (1.0 - 27 / (29 * j_libm(29) ** 2)) * g_t**2
            + (1.0 - 17 / (19 * j_libm(19) ** 2)) * g_c**2
        )
        assert s.g_t == pytest.approx(g_t, abs=1e-14)
        assert s.g_c == pytest.approx(g_c, abs=1e-14)
        assert s.d_hat == pytest.approx(g_t - g_c, abs=1e-14)
        assert s.n_tilde == pytest.approx(n_tilde, abs=1e-14)
        assert s.v2_hat == pytest.approx(v2, abs=1e-12)

    @given(
        st.integers(min_value=4, max_value=500),
        st.integers(min_value=4, max_value=500),
        st.floats(min_value=-3, max_value=3),
        st.floats(min_value=-3, max_value=3),
        st.floats(min_value=0.1, max_value=5),
        st.floats(min_value=0.1, max_value=5),
    )
    @settings(max_examples=100, deadline=None)
    def test_variance_forms_agree(self, n_t, n_c, m_t, m_c, s_t, s_c):
        # sum of per-arm estimates == pooled form with the 1/n_tilde term
        s = study_dsm(ArmSummary(n_t, m_t, s_t), ArmSummary(n_c, m_c, s_c))
        pooled = (
            1.0 / s.n_tilde
            + (1.0 - (n_t - 3) / ((n_t - 1) * j_libm(n_t - 1) ** 2)) * s.g_t**2
            + (1.0 - (n_c - 3) / ((n_c - 1) * j_libm(n_c - 1) ** 2)) * s.g_c**2
        )
        assert s.v2_hat == pytest.approx(pooled, abs=1e-12)
        assert s.v2_hat >= 1.0 / s.n_tilde - 1e-15

    def test_study_from_g_validation(self):
        with pytest.raises(ValueError):
            study_from_g(0.5, 3, 0.2, 10)
        with pytest.raises(ValueError):
            study_from_g(math.inf, 10, 0.2, 10)


class TestAsymptoticVariance:
    def test_zero_deltas(self):
        v = asymptotic_variance(0.0, 0.0, 50, 30, NORMAL_MOMENTS)
        assert v == pytest.approx(1.0 / (50 * 30 / 80), abs=1e-15)

    def test_normal_hand_value(self):
        v = asymptotic_variance(1.0, 0.0, 100, 100, NORMAL_MOMENTS)
        assert v == pytest.approx(1.0 / 50 + 0.005, abs=1e-15)

    def test_agrees_with_exact_variance_at_large_n(self):
        exact = 2 * var_g_true(250, 1.0)
        approx = asymptotic_variance(1.0, 1.0, 250, 250, NORMAL_MOMENTS)
        assert approx == pytest.approx(exact, rel=0.05)

    def test_moment_validation(self):
        with pytest.raises(ValueError):
            MomentPair(alpha3=2.0, alpha4=3.0)

    def test_degenerate_moments_rejected(self):
        # at the moment-inequality boundary with delta = 2/alpha3 in both
        # arms the formula collapses to zero, which is flagged
        boundary = MomentPair(alpha3=2.0, alpha4=5.0)
        with pytest.raises(ValueError):
            asymptotic_variance(1.0, 1.0, 40, 40, boundary)
