"""Cochran-type Q statistics and tests for heterogeneity of DSM effects.

Two weighting schemes are supported: the classical inverse-variance
weights 1/v2_hat_k (fixed-effect weights), whose Q is referred to the
chi-square(K-1) distribution, and effective-sample-size weights
n_tilde_k, whose Q is referred to a weighted sum of chi-square(1)
variables evaluated by the Farebrother algorithm (the "F SSW" test).
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats

from .effects import StudyDsm
from .quadform import eigen_weights, qf_upper_tail

__all__ = [
    "HetApproximation",
    "HetTest",
    "QResult",
    "WeightScheme",
    "cochran_q",
    "expected_qf",
    "het_test",
    "q_f",
    "q_iv",
]


class WeightScheme(Enum):
    INVERSE_VARIANCE = "IV"
    EFFECTIVE_SAMPLE_SIZE = "ESS"


class HetApproximation(Enum):
    CHISQ = "ChiSq"
    FSSW = "FSSW"


@dataclass(frozen=True)
class QResult:
    """Weighted sum of squared deviations from the weighted mean."""

    q: float
    k: int
    weights: tuple[float, ...]
    scheme: WeightScheme | None = None


@dataclass(frozen=True)
class HetTest:
    statistic: float
    approximation: HetApproximation
    p_value: float


def _as_positive_vector(values, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector")
    if np.any(v <= 0.0) or not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be positive and finite")
    return v


def cochran_q(effects, weights, scheme: WeightScheme | None = None) -> QResult:
    """Q = sum w_k (effect_k - weighted mean)^2 for arbitrary positive weights."""
    y = np.asarray(effects, dtype=float)
    w = _as_positive_vector(weights, "weights")
    if y.shape != w.shape:
        raise ValueError(f"effects and weights must match, got shapes {y.shape} and {w.shape}")
    if y.size < 2:
        raise ValueError(f"need at least 2 studies, got {y.size}")
    mean = float(np.dot(w, y) / w.sum())
    q = float(np.dot(w, (y - mean) ** 2))
    return QResult(q=q, k=int(y.size), weights=tuple(w), scheme=scheme)


def q_iv(studies: list[StudyDsm]) -> QResult:
    """Cochran's Q with fixed-effect inverse-variance weights 1/v2_hat_k."""
    effects = [s.d_hat for s in studies]
    weights = [1.0 / s.v2_hat for s in studies]
    return cochran_q(effects, weights, WeightScheme.INVERSE_VARIANCE)


def q_f(studies: list[StudyDsm]) -> QResult:
    """Q with effective-sample-size weights n_tilde_k."""
    effects = [s.d_hat for s in studies]
    weights = [s.n_tilde for s in studies]
    return cochran_q(effects, weights, WeightScheme.EFFECTIVE_SAMPLE_SIZE)


def expected_qf(weights, variances, tau2: float) -> float:
    """First moment of the constant-weight Q under the random-effects model:

        E(Q) = W sum_k p_k (1 - p_k) (E(v_k^2) + tau^2),

    with W = sum w_k and p_k = w_k / W. Linear and increasing in tau^2.
    """
    w = _as_positive_vector(weights, "weights")
    v2 = _as_positive_vector(variances, "variances")
    if w.shape != v2.shape:
        raise ValueError(f"weights and variances must match, got shapes {w.shape} and {v2.shape}")
    if w.size < 2:
        raise ValueError(f"need at least 2 studies, got {w.size}")
    if tau2 < 0.0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2}")
    big_w = w.sum()
    p = w / big_w
    return float(big_w * np.sum(p * (1.0 - p) * (v2 + tau2)))


def het_test(studies: list[StudyDsm], approximation: HetApproximation) -> HetTest:
    """Test of effect homogeneity under the chosen null approximation.

    CHISQ refers Q with inverse-variance weights to chi-square(K-1).
    FSSW refers Q with effective-sample-size weights to the Farebrother
    distribution of the centering quadratic form with the studies'
    estimated conditional variances plugged in.
    """
    if len(studies) < 2:
        raise ValueError(f"need at least 2 studies, got {len(studies)}")
    if approximation is HetApproximation.CHISQ:
        res = q_iv(studies)
        p = stats.chi2.sf(res.q, res.k - 1)
        return HetTest(statistic=res.q, approximation=approximation, p_value=float(p))
    if approximation is HetApproximation.FSSW:
        res = q_f(studies)
        spec = eigen_weights([s.n_tilde for s in studies], [s.v2_hat for s in studies])
        p = qf_upper_tail(spec, res.q)
        return HetTest(statistic=res.q, approximation=approximation, p_value=float(p))
    raise ValueError(f"unknown approximation {approximation!r}")
