"""Point and interval estimation of the overall effect.

SSW weights each study's effect by its effective sample size
n_tilde_k = n_Tk n_Ck / n_k, so the point estimate never depends on
estimated variances. The inverse-variance estimators weight by
1/(v2_hat_k + tau2_hat) for a chosen tau^2 estimator. Intervals:
normal-quantile intervals around the IV estimate (DL, REML, MP), the
HKSJ t-interval with a weighted sample-variance scale, and
normal-quantile intervals around SSW whose standard error plugs in the
SMC or SSC estimate of tau^2.
"""

import math
from dataclasses import dataclass

import numpy as np

from .effects import StudyDsm
from .numerics import normal_quantile, student_t_quantile
from .tau2 import POINT_ESTIMATORS, Tau2Estimate

__all__ = [
    "DELTA_INTERVAL_METHODS",
    "DELTA_POINT_METHODS",
    "EffectEstimate",
    "EffectInterval",
    "ci_hksj",
    "ci_iv_normal",
    "ci_ssw",
    "pool_iv",
    "pool_ssw",
]

DELTA_POINT_METHODS = ("SSW", "IV-DL", "IV-REML", "IV-MP")
DELTA_INTERVAL_METHODS = ("DL", "REML", "MP", "HKSJ", "SMC", "SSC")


@dataclass(frozen=True)
class EffectEstimate:
    method: str
    value: float
    se: float
    tau2_used: float


@dataclass(frozen=True)
class EffectInterval:
    method: str
    center: float
    lo: float
    hi: float
    level: float

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    @property
    def half_width(self) -> float:
        return 0.5 * (self.hi - self.lo)


def _arrays(studies: list[StudyDsm], min_k: int = 1):
    if len(studies) < min_k:
        raise ValueError(f"need at least {min_k} studies, got {len(studies)}")
    return (
        np.array([s.d_hat for s in studies]),
        np.array([s.v2_hat for s in studies]),
        np.array([s.n_tilde for s in studies]),
    )


def pool_ssw(studies: list[StudyDsm]) -> EffectEstimate:
    """Effective-sample-size weighted mean of the study effects.

    The attached standard error is the tau^2-free plug-in
    sqrt(sum n_tilde^2 v2_hat) / sum n_tilde; interval constructions
    compute their own scale.
    """
    y, v2, nt = _arrays(studies)
    w_sum = float(nt.sum())
    value = float(np.dot(nt, y)) / w_sum
    se = math.sqrt(float(np.dot(nt**2, v2))) / w_sum
    return EffectEstimate(method="SSW", value=value, se=se, tau2_used=0.0)


def pool_iv(studies: list[StudyDsm], tau2: Tau2Estimate) -> EffectEstimate:
    """Inverse-variance weighted mean with weights 1/(v2_hat_k + tau2)."""
    y, v2, _ = _arrays(studies)
    if tau2.value < 0.0:
        raise ValueError(f"tau2 must be nonnegative, got {tau2.value}")
    w = 1.0 / (v2 + tau2.value)
    w_sum = w.sum()
    value = float(np.dot(w, y) / w_sum)
    return EffectEstimate(
        method=f"IV-{tau2.method}", value=value, se=1.0 / math.sqrt(w_sum), tau2_used=tau2.value
    )


def _check_level(level: float):
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")


def _resolve_tau2(studies, tau2_method: str, tau2: Tau2Estimate | None) -> Tau2Estimate:
    if tau2 is None:
        return POINT_ESTIMATORS[tau2_method](studies)
    if tau2.method != tau2_method:
        raise ValueError(f"precomputed tau2 is {tau2.method}, expected {tau2_method}")
    return tau2


def ci_iv_normal(
    studies: list[StudyDsm],
    tau2_method: str = "DL",
    level: float = 0.95,
    tau2: Tau2Estimate | None = None,
) -> EffectInterval:
    """Normal-quantile interval around the inverse-variance estimate,
    with tau^2 estimated by DL, REML, or MP (or supplied precomputed)."""
    if tau2_method not in ("DL", "REML", "MP"):
        raise ValueError(f"tau2_method must be DL, REML, or MP, got {tau2_method!r}")
    _check_level(level)
    _arrays(studies, min_k=2)
    est = pool_iv(studies, _resolve_tau2(studies, tau2_method, tau2))
    half = normal_quantile(0.5 + level / 2.0) * est.se
    return EffectInterval(
        method=tau2_method, center=est.value, lo=est.value - half, hi=est.value + half, level=level
    )


def ci_hksj(studies: list[StudyDsm], level: float = 0.95, tau2: Tau2Estimate | None = None) -> EffectInterval:
    """Hartung-Knapp / Sidik-Jonkman interval: t-quantile with the weighted
    sample variance of the effects as scale, anchored at the DL estimate."""
    _check_level(level)
    y, v2, _ = _arrays(studies, min_k=2)
    k = y.size
    est = _resolve_tau2(studies, "DL", tau2)
    w = 1.0 / (v2 + est.value)
    w_sum = w.sum()
    mu = float(np.dot(w, y) / w_sum)
    q_scale = float(np.dot(w, (y - mu) ** 2)) / (k - 1)
    half = student_t_quantile(0.5 + level / 2.0, k - 1) * math.sqrt(q_scale / w_sum)
    return EffectInterval(method="HKSJ", center=mu, lo=mu - half, hi=mu + half, level=level)


def ci_ssw(
    studies: list[StudyDsm],
    tau2_method: str = "SMC",
    level: float = 0.95,
    tau2: Tau2Estimate | None = None,
) -> EffectInterval:
    """Normal-quantile interval centered at SSW with standard error
    sqrt(sum n_tilde^2 (v2_hat + tau2_hat)) / sum n_tilde, tau^2 estimated
    by SMC or SSC (or supplied precomputed)."""
    if tau2_method not in ("SMC", "SSC"):
        raise ValueError(f"tau2_method must be SMC or SSC, got {tau2_method!r}")
    _check_level(level)
    y, v2, nt = _arrays(studies, min_k=2)
    est = _resolve_tau2(studies, tau2_method, tau2)
    w_sum = float(nt.sum())
    center = float(np.dot(nt, y)) / w_sum
    se = math.sqrt(float(np.dot(nt**2, v2 + est.value))) / w_sum
    half = normal_quantile(0.5 + level / 2.0) * se
    return EffectInterval(
        method=tau2_method, center=center, lo=center - half, hi=center + half, level=level
    )
