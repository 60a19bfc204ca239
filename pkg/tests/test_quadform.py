"""Eigen-reduction and CDF of weighted chi-square combinations.

The Monte Carlo oracle draws the quadratic form directly; the trace
identity and chi-square reductions give exact anchors.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dsmeta.quadform import (
    QuadFormConvergenceError,
    QuadFormSpec,
    eigen_weights,
    qf_cdf,
    qf_upper_tail,
)

CHI2_MEDIAN_DF2 = 1.3862943611198906
CHI2_95_DF1 = 3.841458820694126


def trace_expected(w, s2):
    w = np.asarray(w, float)
    s2 = np.asarray(s2, float)
    return float(np.sum(w * s2 * (1.0 - w / w.sum())))


class TestEigenWeights:
    def test_two_equal_studies(self):
        spec = eigen_weights([1.0, 1.0], [1.0, 1.0])
        assert spec.lambdas == pytest.approx((1.0, 0.0), abs=1e-12)

    def test_three_equal_studies(self):
        spec = eigen_weights([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
        assert spec.lambdas == pytest.approx((1.0, 1.0, 0.0), abs=1e-12)

    def test_hand_trace_two_studies(self):
        # w=(1,2), s2=(3,1): single nonzero eigenvalue equals the trace
        # 3*(1-1/3) + 2*(1-2/3) = 8/3; confirmed by the 2x2 closed form.
        spec = eigen_weights([1.0, 2.0], [3.0, 1.0])
        assert spec.lambdas[0] == pytest.approx(8.0 / 3.0, abs=1e-12)
        assert spec.lambdas[1] == pytest.approx(0.0, abs=1e-12)
        # closed-form eigenvalues of [[a, b], [b, d]]
        w, s2, big_w = np.array([1.0, 2.0]), np.array([3.0, 1.0]), 3.0
        ws = w * np.sqrt(s2)
        a = w[0] * s2[0] - ws[0] ** 2 / big_w
        d = w[1] * s2[1] - ws[1] ** 2 / big_w
        b = -ws[0] * ws[1] / big_w
        lam_max = 0.5 * (a + d) + math.sqrt(0.25 * (a - d) ** 2 + b * b)
        assert spec.lambdas[0] == pytest.approx(lam_max, abs=1e-12)

    def test_exactly_one_zero_eigenvalue(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(2, 12))
            spec = eigen_weights(rng.uniform(0.5, 20, k), rng.uniform(0.1, 5, k))
            assert sum(1 for lam in spec.lambdas if lam == 0.0) == 1

    @given(
        st.integers(min_value=2, max_value=50).flatmap(
            lambda k: st.tuples(
                st.lists(st.floats(min_value=0.01, max_value=100), min_size=k, max_size=k),
                st.lists(st.floats(min_value=0.01, max_value=100), min_size=k, max_size=k),
            )
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_trace_identity(self, pair):
        w, s2 = pair
        spec = eigen_weights(w, s2)
        expected = trace_expected(w, s2)
        assert spec.trace == pytest.approx(expected, abs=1e-9 * max(1.0, expected))

    def test_validation(self):
        with pytest.raises(ValueError):
            eigen_weights([1.0], [1.0])
        with pytest.raises(ValueError):
            eigen_weights([1.0, -1.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            eigen_weights([1.0, 1.0], [1.0, 1.0, 1.0])


class TestCdf:
    def test_single_lambda_reduces_to_chi2(self):
        spec = QuadFormSpec((1.0,))
        xs = np.linspace(0.05, 12.0, 30)
        assert np.allclose(qf_cdf(spec, xs), stats.chi2.cdf(xs, 1), atol=1e-6)

    def test_two_unit_lambdas_median(self):
        assert qf_cdf(QuadFormSpec((1.0, 1.0)), CHI2_MEDIAN_DF2) == pytest.approx(0.5, abs=1e-6)

    def test_monte_carlo_oracle(self):
        spec = QuadFormSpec((2.0, 1.0, 0.5))
        rng = np.random.default_rng(11)
        n = 10_000_000
        hits = {1.0: 0, 3.0: 0, 7.0: 0}
        chunk = 1_000_000
        for _ in range(n // chunk):
            z = rng.standard_normal((3, chunk))
            q = 2.0 * z[0] ** 2 + z[1] ** 2 + 0.5 * z[2] ** 2
            for x in hits:
                hits[x] += int(np.sum(q <= x))
        for x, hit in hits.items():
            p_hat = hit / n
            se = math.sqrt(p_hat * (1 - p_hat) / n)
            assert qf_cdf(spec, x) == pytest.approx(p_hat, abs=3 * se)

    def test_nonpositive_abscissa(self):
        spec = QuadFormSpec((1.0, 2.0))
        assert qf_cdf(spec, 0.0) == 0.0
        assert qf_cdf(spec, -3.0) == 0.0

    def test_monotone_and_bounded(self):
        spec = QuadFormSpec((3.0, 1.0, 0.25, 0.0))
        xs = np.linspace(0.0, 30.0, 200)
        vals = qf_cdf(spec, xs)
        assert np.all(np.diff(vals) >= -1e-12)
        assert np.all((vals >= 0.0) & (vals <= 1.0))

    def test_scale_equivariance(self):
        lam = (2.0, 1.0, 0.5)
        for c in (0.1, 3.7, 42.0):
            scaled = QuadFormSpec(tuple(c * v for v in lam))
            for x in (0.5, 2.0, 6.0):
                assert qf_cdf(scaled, c * x) == pytest.approx(qf_cdf(QuadFormSpec(lam), x), abs=1e-8)

    @pytest.mark.parametrize("k", [2, 3])
    def test_brute_force_centering_form(self, k):
        # simulate Q = sum w (y - ybar_w)^2 with a common mean directly
        rng = np.random.default_rng(17 + k)
        w = rng.uniform(0.5, 5.0, k)
        s2 = rng.uniform(0.2, 3.0, k)
        spec = eigen_weights(w, s2)
        n = 1_000_000
        y = 0.7 + rng.standard_normal((n, k)) * np.sqrt(s2)
        ybar = (y * w).sum(axis=1) / w.sum()
        q = ((y - ybar[:, None]) ** 2 * w).sum(axis=1)
        probes = np.quantile(q, np.linspace(0.025, 0.975, 21))
        analytic = qf_cdf(spec, probes)
        for x, p in zip(probes, analytic):
            p_hat = float(np.mean(q <= x))
            se = math.sqrt(p_hat * (1 - p_hat) / n)
            assert p == pytest.approx(p_hat, abs=3 * se)

    def test_degenerate_all_zero(self):
        spec = QuadFormSpec((0.0, 0.0))
        assert qf_cdf(spec, 1.0) == 1.0
        assert qf_upper_tail(spec, 1.0) == 0.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            qf_cdf(QuadFormSpec((1.0,)), math.inf)


class TestUpperTail:
    def test_single_lambda_tail(self):
        assert qf_upper_tail(QuadFormSpec((1.0,)), CHI2_95_DF1) == pytest.approx(0.05, abs=1e-6)

    def test_tail_at_zero(self):
        assert qf_upper_tail(QuadFormSpec((1.0, 2.0)), 0.0) == 1.0

    def test_small_tail_against_monte_carlo(self):
        spec = QuadFormSpec((2.0, 1.0))
        rng = np.random.default_rng(29)
        n = 10_000_000
        hit = 0
        # pick the abscissa with tail near 0.005 from the analytic side
        xs = np.linspace(10.0, 20.0, 200)
        tails = qf_upper_tail(spec, xs)
        x = float(xs[int(np.argmin(np.abs(tails - 0.005)))])
        chunk = 1_000_000
        for _ in range(n // chunk):
            z = rng.standard_normal((2, chunk))
            q = 2.0 * z[0] ** 2 + z[1] ** 2
            hit += int(np.sum(q > x))
        p_hat = hit / n
        se = math.sqrt(p_hat * (1 - p_hat) / n)
        assert qf_upper_tail(spec, x) == pytest.approx(p_hat, abs=3 * se)

    def test_complements_cdf(self):
        spec = QuadFormSpec((1.5, 0.5, 0.25))
        for x in (0.5, 2.0, 8.0):
            assert qf_cdf(spec, x) + qf_upper_tail(spec, x) == pytest.approx(1.0, abs=2e-6)


class TestFallback:
    """Forcing a tiny series budget exercises the characteristic-function
    inversion; it must agree with the series."""

    @pytest.mark.parametrize("x", [0.3, 1.0, 3.0, 7.0, 25.0])
    def test_inversion_matches_series(self, x):
        spec = QuadFormSpec((2.0, 1.0, 0.5))
        assert qf_cdf(spec, x, max_terms=2) == pytest.approx(qf_cdf(spec, x), abs=2e-6)

    def test_inversion_tail_matches_series(self):
        spec = QuadFormSpec((2.0, 1.0, 0.5))
        assert qf_upper_tail(spec, 20.0, max_terms=2) == pytest.approx(
            qf_upper_tail(spec, 20.0), abs=2e-6
        )

    def test_hopeless_spectrum_reports_bound(self):
        # series needs ~1e15 terms, inversion ~1e7 segments: both refuse
        spec = QuadFormSpec((1.0, 1e-15, 1e-15))
        with pytest.raises(QuadFormConvergenceError) as excinfo:
            qf_cdf(spec, 1.0)
        assert excinfo.value.bound > 0.0
