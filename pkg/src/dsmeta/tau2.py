"""Point and interval estimators of the between-studies variance tau^2.

Point estimators
----------------
DL    moment estimator from Q with inverse-variance weights
      (DerSimonian-Laird).
MP    generalized-Q moment estimator: solves Q(tau^2) = K - 1 with weights
      1/(v2_hat_k + tau^2) (Mandel-Paule).
REML  restricted maximum likelihood, solved by bounded 1-D maximization.
SSC   conditional moment estimator from the first moment of the
      effective-sample-size-weighted Q.
SMC   median-consistent estimator: solves F(Q | tau^2) = 0.5 under the
      Farebrother CDF with plug-in variances v2_hat_k + tau^2.

Interval estimators
-------------------
QP    Q-profile interval from the chi-square quantiles of the
      generalized Q (Viechtbauer).
PL    profile-likelihood interval (Hardy-Thompson construction, anchored
      at the maximum-likelihood point estimate).
FPC   Farebrother profile interval: {tau^2 : F(Q | tau^2) in
      [alpha/2, 1 - alpha/2]}.

All estimators truncate at zero; truncation is reported on the result.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .effects import StudyDsm
from .heterogeneity import q_f, q_iv
from .numerics import Bracket, ConvergenceError, NoSignChangeError, chi_square_quantile, find_root
from .quadform import eigen_weights, qf_cdf

__all__ = [
    "INTERVAL_ESTIMATORS",
    "POINT_ESTIMATORS",
    "Tau2Estimate",
    "Tau2Interval",
    "tau2_dl",
    "tau2_interval_fpc",
    "tau2_interval_pl",
    "tau2_interval_qp",
    "tau2_ml",
    "tau2_mp",
    "tau2_reml",
    "tau2_smc",
    "tau2_ssc",
]

# Root/argmax location tolerance on the tau^2 axis.
ROOT_TOL = 1e-12
# Hard ceiling for bracket expansion, as a multiple of max(v2_hat, 1).
BRACKET_CAP_FACTOR = 1e3


@dataclass(frozen=True)
class Tau2Estimate:
    method: str
    value: float
    converged: bool
    iterations: int
    truncated: bool = False


@dataclass(frozen=True)
class Tau2Interval:
    method: str
    lo: float
    hi: float
    level: float

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


def _validate(studies: list[StudyDsm], min_k: int = 2):
    if len(studies) < min_k:
        raise ValueError(f"need at least {min_k} studies, got {len(studies)}")
    return (
        np.array([s.d_hat for s in studies]),
        np.array([s.v2_hat for s in studies]),
        np.array([s.n_tilde for s in studies]),
    )


def _bracket_hi(y: np.ndarray) -> float:
    return max(1.0, 10.0 * float(np.var(y)))


def _bracket_cap(v2: np.ndarray) -> float:
    return BRACKET_CAP_FACTOR * max(float(v2.max()), 1.0)


def _expansions_to_cap(hi: float, cap: float) -> int:
    return max(0, math.ceil(math.log2(cap / hi))) if hi < cap else 0


def _generalized_q(y: np.ndarray, v2: np.ndarray, tau2: float) -> float:
    """Q with weights 1/(v2_k + tau^2); strictly decreasing in tau^2."""
    w = 1.0 / (v2 + tau2)
    mu = float(np.dot(w, y) / w.sum())
    return float(np.dot(w, (y - mu) ** 2))


def tau2_dl(studies: list[StudyDsm]) -> Tau2Estimate:
    """DerSimonian-Laird moment estimator,
    max(0, (Q_IV - (K-1)) / (W - sum w^2 / W))."""
    y, v2, _ = _validate(studies)
    res = q_iv(studies)
    w = np.asarray(res.weights)
    big_w = float(w.sum())
    denom = big_w - float(np.dot(w, w)) / big_w
    raw = (res.q - (res.k - 1)) / denom
    return Tau2Estimate(
        method="DL", value=max(0.0, raw), converged=True, iterations=0, truncated=raw < 0.0
    )


def tau2_mp(studies: list[StudyDsm]) -> Tau2Estimate:
    """Mandel-Paule estimator: the tau^2 >= 0 with Q(tau^2) = K - 1."""
    y, v2, _ = _validate(studies)
    k = y.size
    target = float(k - 1)

    def h(t):
        return _generalized_q(y, v2, t) - target

    if h(0.0) <= 0.0:
        return Tau2Estimate(method="MP", value=0.0, converged=True, iterations=0, truncated=True)
    hi = _bracket_hi(y)
    cap = _bracket_cap(v2)
    try:
        root = find_root(h, Bracket(0.0, hi), tol=ROOT_TOL, max_expansions=_expansions_to_cap(hi, cap))
    except NoSignChangeError as exc:
        raise ConvergenceError(f"Mandel-Paule bracket expansion exceeded its cap ({cap:.3g})") from exc
    return Tau2Estimate(method="MP", value=root, converged=True, iterations=0)


def _profile_loglik(y: np.ndarray, v2: np.ndarray, tau2: float) -> float:
    """Joint normal log-likelihood with the mean profiled out (constants dropped)."""
    w = 1.0 / (v2 + tau2)
    mu = float(np.dot(w, y) / w.sum())
    return -0.5 * (float(np.sum(np.log(v2 + tau2))) + float(np.dot(w, (y - mu) ** 2)))


def _restricted_loglik(y: np.ndarray, v2: np.ndarray, tau2: float) -> float:
    """Restricted log-likelihood (constants dropped)."""
    w = 1.0 / (v2 + tau2)
    sw = w.sum()
    mu = float(np.dot(w, y)) / sw
    return -0.5 * (float(np.sum(np.log(v2 + tau2))) + math.log(sw) + float(np.dot(w, (y - mu) ** 2)))


def _maximize_on_halfline(objective, y: np.ndarray, v2: np.ndarray) -> tuple[float, int, bool]:
    """Maximize over tau^2 >= 0, growing the search interval until the
    optimum is interior (or the cap is hit). Returns (argmax, nfev, converged)."""
    hi = _bracket_hi(y)
    cap = _bracket_cap(v2)
    nfev = 0
    while True:
        res = optimize.minimize_scalar(
            lambda t: -objective(t),
            bounds=(0.0, hi),
            method="bounded",
            options={"xatol": ROOT_TOL},
        )
        nfev += int(res.nfev)
        x = float(res.x)
        at_upper = x >= hi - max(1e-8, 1e-8 * hi)
        if at_upper and hi < cap:
            hi = min(2.0 * hi, cap)
            continue
        # The bounded search never lands exactly on an endpoint; compare with
        # the endpoints so boundary optima (notably zero) come out exact.
        candidates = [(0.0, objective(0.0)), (x, objective(x))]
        if at_upper:
            candidates.append((hi, objective(hi)))
        best_x = max(candidates, key=lambda p: p[1])[0]
        return best_x, nfev, not at_upper


def tau2_reml(studies: list[StudyDsm]) -> Tau2Estimate:
    """Restricted-maximum-likelihood estimator by bounded search."""
    y, v2, _ = _validate(studies)
    x, nfev, ok = _maximize_on_halfline(lambda t: _restricted_loglik(y, v2, t), y, v2)
    return Tau2Estimate(
        method="REML", value=x, converged=ok, iterations=nfev, truncated=x == 0.0
    )


def tau2_ml(studies: list[StudyDsm]) -> Tau2Estimate:
    """Maximum-likelihood estimator of tau^2 (anchor for the PL interval)."""
    y, v2, _ = _validate(studies)
    x, nfev, ok = _maximize_on_halfline(lambda t: _profile_loglik(y, v2, t), y, v2)
    return Tau2Estimate(method="ML", value=x, converged=ok, iterations=nfev, truncated=x == 0.0)


def tau2_ssc(studies: list[StudyDsm]) -> Tau2Estimate:
    """Conditional moment estimator with effective-sample-size weights,
    max(0, (Q_F / W - sum p(1-p) v2_hat) / sum p(1-p))."""
    y, v2, n_tilde = _validate(studies)
    res = q_f(studies)
    w = np.asarray(res.weights)
    big_w = float(w.sum())
    p = w / big_w
    pp = p * (1.0 - p)
    raw = (res.q / big_w - float(np.dot(pp, v2))) / float(pp.sum())
    return Tau2Estimate(
        method="SSC", value=max(0.0, raw), converged=True, iterations=0, truncated=raw < 0.0
    )


# CDF evaluations inside root solves use a tolerance far below the solver's
# residual target so series truncation cannot masquerade as a root.
_PROFILE_CDF_TOL = 1e-9


def _qf_cdf_at(n_tilde: np.ndarray, v2: np.ndarray, q: float, tau2: float) -> float:
    spec = eigen_weights(n_tilde, v2 + tau2)
    return float(qf_cdf(spec, q, tol=_PROFILE_CDF_TOL))


def tau2_smc(studies: list[StudyDsm]) -> Tau2Estimate:
    """Median-consistent estimator: solves F(Q_F | tau^2) = 0.5 under the
    Farebrother CDF with plug-in variances v2_hat_k + tau^2."""
    y, v2, n_tilde = _validate(studies)
    q = q_f(studies).q

    def h(t):
        return _qf_cdf_at(n_tilde, v2, q, t) - 0.5

    if h(0.0) <= 0.0:
        return Tau2Estimate(method="SMC", value=0.0, converged=True, iterations=0, truncated=True)
    hi = _bracket_hi(y)
    cap = _bracket_cap(v2)
    try:
        root = find_root(h, Bracket(0.0, hi), tol=1e-10, max_expansions=_expansions_to_cap(hi, cap))
    except NoSignChangeError as exc:
        raise ConvergenceError(f"median-consistent bracket expansion exceeded its cap ({cap:.3g})") from exc
    return Tau2Estimate(method="SMC", value=root, converged=True, iterations=0)


def _decreasing_root(h, hi0: float, cap: float, tol: float) -> float:
    """Root of a strictly decreasing function with h(0) > 0, expanding the
    upper endpoint up to the cap."""
    return find_root(h, Bracket(0.0, hi0), tol=tol, max_expansions=_expansions_to_cap(hi0, cap))


def tau2_interval_qp(studies: list[StudyDsm], level: float = 0.95) -> Tau2Interval:
    """Q-profile interval: endpoints where the generalized Q crosses the
    chi-square(K-1) quantiles at 1 - alpha/2 and alpha/2."""
    y, v2, _ = _validate(studies)
    _check_level(level)
    k = y.size
    alpha = 1.0 - level
    q_hi = chi_square_quantile(1.0 - alpha / 2.0, k - 1)
    q_lo = chi_square_quantile(alpha / 2.0, k - 1)
    hi0 = _bracket_hi(y)
    cap = _bracket_cap(v2)

    def crossing(target):
        def h(t):
            return _generalized_q(y, v2, t) - target

        if h(0.0) <= 0.0:
            return 0.0
        try:
            return _decreasing_root(h, hi0, cap, ROOT_TOL)
        except NoSignChangeError as exc:
            raise ConvergenceError(f"Q-profile bracket expansion exceeded its cap ({cap:.3g})") from exc

    lo = crossing(q_hi)
    hi = crossing(q_lo)
    return Tau2Interval(method="QP", lo=lo, hi=hi, level=level)


def tau2_interval_pl(studies: list[StudyDsm], level: float = 0.95) -> Tau2Interval:
    """Profile-likelihood interval: {tau^2 >= 0 : deviance <= chi-square(1)
    quantile}, with the deviance anchored at the ML point estimate."""
    y, v2, _ = _validate(studies)
    _check_level(level)
    anchor = tau2_ml(studies)
    l_max = _profile_loglik(y, v2, anchor.value)
    threshold = chi_square_quantile(level, 1)

    def deviance_gap(t):
        return 2.0 * (l_max - _profile_loglik(y, v2, t)) - threshold

    cap = _bracket_cap(v2)
    if deviance_gap(0.0) <= 0.0:
        lo = 0.0
    else:
        lo = find_root(deviance_gap, Bracket(0.0, anchor.value), tol=ROOT_TOL)

    hi_end = max(2.0 * anchor.value, 1.0)
    while deviance_gap(hi_end) <= 0.0:
        if hi_end >= cap:
            raise ConvergenceError(
                f"profile likelihood too flat: deviance never reaches its threshold below the cap ({cap:.3g})"
            )
        hi_end = min(2.0 * hi_end, cap)
    hi = find_root(deviance_gap, Bracket(anchor.value, hi_end), tol=ROOT_TOL)
    return Tau2Interval(method="PL", lo=lo, hi=hi, level=level)


def tau2_interval_fpc(studies: list[StudyDsm], level: float = 0.95) -> Tau2Interval:
    """Farebrother profile interval: {tau^2 >= 0 : F(Q_F | tau^2) in
    [alpha/2, 1 - alpha/2]} with plug-in conditional variances.

    F(Q | tau^2) is strictly decreasing in tau^2, so the lower endpoint
    solves F = 1 - alpha/2 and the upper endpoint solves F = alpha/2; both
    truncate at zero.
    """
    y, v2, n_tilde = _validate(studies)
    _check_level(level)
    alpha = 1.0 - level
    q = q_f(studies).q
    hi0 = _bracket_hi(y)
    cap = _bracket_cap(v2)

    def crossing(target):
        def h(t):
            return _qf_cdf_at(n_tilde, v2, q, t) - target

        if h(0.0) <= 0.0:
            return 0.0
        try:
            return _decreasing_root(h, hi0, cap, 1e-10)
        except NoSignChangeError as exc:
            raise ConvergenceError(
                f"Farebrother profile bracket expansion exceeded its cap ({cap:.3g})"
            ) from exc

    lo = crossing(1.0 - alpha / 2.0)
    hi = crossing(alpha / 2.0)
    return Tau2Interval(method="FPC", lo=lo, hi=hi, level=level)


def _check_level(level: float):
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")


POINT_ESTIMATORS = {
    "DL": tau2_dl,
    "REML": tau2_reml,
    "MP": tau2_mp,
    "SSC": tau2_ssc,
    "SMC": tau2_smc,
}

INTERVAL_ESTIMATORS = {
    "QP": tau2_interval_qp,
    "PL": tau2_interval_pl,
    "FPC": tau2_interval_fpc,
}
