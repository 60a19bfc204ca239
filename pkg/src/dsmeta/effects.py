"""Study-level difference of standardized means (DSM).

Each arm's mean is standardized by that arm's own standard deviation, so
no common-variance assumption is needed: the study effect is
d_hat = g_T - g_C, where g_j is the bias-corrected standardized sample
mean of arm j. Variance formulas below are exact under normal data.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

from .numerics import hedges_j

__all__ = [
    "ArmSummary",
    "MomentPair",
    "NORMAL_MOMENTS",
    "StudyDsm",
    "asymptotic_variance",
    "standardized_mean",
    "study_dsm",
    "study_from_g",
    "var_g_hat",
    "var_g_true",
]

# Arms below this size make the variance formulas blow up (n - 3 factors),
# so they are rejected at ingestion.
MIN_ARM_SIZE = 4


def _check_arm_size(n: int) -> int:
    if not isinstance(n, (int,)) or isinstance(n, bool):
        raise ValueError(f"arm size must be an integer, got {n!r}")
    if n < MIN_ARM_SIZE:
        raise ValueError(f"arm size must be at least {MIN_ARM_SIZE}, got {n}")
    return n


@dataclass(frozen=True)
class ArmSummary:
    """Raw per-arm summary statistics: size, sample mean, sample SD."""

    n: int
    mean: float
    sd: float

    def __post_init__(self):
        _check_arm_size(self.n)
        if not (math.isfinite(self.mean) and math.isfinite(self.sd)):
            raise ValueError("arm mean and sd must be finite")
        if self.sd <= 0.0:
            raise ValueError(f"arm sd must be positive, got {self.sd}")


@dataclass(frozen=True)
class StudyDsm:
    """Per-study effect: corrected standardized means, their difference,
    its estimated variance, and the effective sample size."""

    g_t: float
    g_c: float
    n_t: int
    n_c: int
    d_hat: float
    v2_hat: float
    n_tilde: float


@dataclass(frozen=True)
class MomentPair:
    """Standardized third and fourth moments of the underlying data."""

    alpha3: float
    alpha4: float

    def __post_init__(self):
        if self.alpha4 < 1.0 + self.alpha3**2:
            raise ValueError(
                f"moment inequality violated: alpha4={self.alpha4} < 1 + alpha3^2={1.0 + self.alpha3**2}"
            )


NORMAL_MOMENTS = MomentPair(alpha3=0.0, alpha4=3.0)


@lru_cache(maxsize=4096)
def _correction_factor(n: int) -> float:
    """Coefficient of g^2 in the unbiased variance estimate:
    1 - (n - 3) / ((n - 1) J^2(n - 1)). Nonnegative for all n >= 4."""
    j = hedges_j(n - 1)
    return 1.0 - (n - 3.0) / ((n - 1.0) * j * j)


def standardized_mean(arm: ArmSummary) -> tuple[float, float]:
    """Standardized sample mean of one arm and its corrected version.

    Returns (d, g) with d = mean/sd and g = J(n - 1) d. g is an unbiased
    estimate of mu/sigma; the correction shrinks toward zero, so |g| < |d|
    whenever d != 0.
    """
    d = arm.mean / arm.sd
    g = hedges_j(arm.n - 1) * d
    return d, g


def var_g_true(n: int, delta: float) -> float:
    """Exact variance of the corrected standardized mean g under normal data
    with true standardized mean delta:

        Var(g) = (n-1) J^2(n-1) / (n (n-3)) * (1 + n delta^2) - delta^2
    """
    _check_arm_size(n)
    j = hedges_j(n - 1)
    return (n - 1.0) * j * j / (n * (n - 3.0)) * (1.0 + n * delta * delta) - delta * delta


def var_g_hat(n: int, g: float) -> float:
    """Unbiased estimate of Var(g) from the observed g:

        1/n + (1 - (n-3) / ((n-1) J^2(n-1))) g^2

    Equals 1/n at g = 0 and increases in |g|.
    """
    _check_arm_size(n)
    return 1.0 / n + _correction_factor(n) * g * g


def study_from_g(g_t: float, n_t: int, g_c: float, n_c: int) -> StudyDsm:
    """Assemble a study effect from already-corrected standardized means."""
    _check_arm_size(n_t)
    _check_arm_size(n_c)
    if not (math.isfinite(g_t) and math.isfinite(g_c)):
        raise ValueError("standardized means must be finite")
    n_tilde = n_t * n_c / (n_t + n_c)
    return StudyDsm(
        g_t=g_t,
        g_c=g_c,
        n_t=n_t,
        n_c=n_c,
        d_hat=g_t - g_c,
        v2_hat=var_g_hat(n_t, g_t) + var_g_hat(n_c, g_c),
        n_tilde=n_tilde,
    )


def study_dsm(treatment: ArmSummary, control: ArmSummary) -> StudyDsm:
    """Study-level DSM from the two arm summaries.

    d_hat = g_T - g_C and v2_hat is the sum of the per-arm unbiased variance
    estimates, which equals 1/n_tilde plus the two g^2 correction terms.
    """
    _, g_t = standardized_mean(treatment)
    _, g_c = standardized_mean(control)
    return study_from_g(g_t, treatment.n, g_c, control.n)


def asymptotic_variance(delta_t: float, delta_c: float, n_t: int, n_c: int, moments: MomentPair) -> float:
    """Large-sample variance of the estimated DSM for data from a common
    distribution family with standardized moments alpha3, alpha4:

        1/n_tilde - (delta_T/n_T + delta_C/n_C) alpha3
                  + (delta_T^2/n_T + delta_C^2/n_C) (alpha4 - 1)/4

    For normal data this reduces to 1/n_tilde + (delta_T^2/n_T + delta_C^2/n_C)/2.
    """
    if n_t < 1 or n_c < 1:
        raise ValueError(f"arm sizes must be positive, got n_t={n_t}, n_c={n_c}")
    n_tilde = n_t * n_c / (n_t + n_c)
    value = (
        1.0 / n_tilde
        - (delta_t / n_t + delta_c / n_c) * moments.alpha3
        + (delta_t**2 / n_t + delta_c**2 / n_c) * (moments.alpha4 - 1.0) / 4.0
    )
    if value <= 0.0:
        raise ValueError(
            f"asymptotic variance came out non-positive ({value}); check the moment inputs"
        )
    return value
