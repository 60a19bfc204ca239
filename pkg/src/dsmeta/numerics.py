"""Special functions, probability distributions, seeded random streams,
and scalar root-finding / maximization used throughout the package.

Distribution evaluations are thin wrappers around scipy with the domain
checks this package relies on; the random-stream type wraps numpy's
counter-based Philox generator so that draws are reproducible regardless
of worker scheduling.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special, stats

__all__ = [
    "Bracket",
    "ConvergenceError",
    "NoSignChangeError",
    "RngStream",
    "chi_square_cdf",
    "chi_square_quantile",
    "find_root",
    "hedges_j",
    "log_gamma",
    "maximize_1d",
    "noncentral_t_cdf",
    "normal_quantile",
    "sample_noncentral_t",
    "student_t_quantile",
]

# |ncp| beyond which the noncentral-t CDF is evaluated by quadrature
# instead of the closed-form library routine.
_NCT_QUAD_THRESHOLD = 37.0


class NoSignChangeError(ValueError):
    """Root bracket endpoints do not straddle a sign change."""


class ConvergenceError(RuntimeError):
    """An iterative numerical procedure failed to reach its tolerance."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by a seed and an integer path.

    Identical (seed, path) pairs yield identical draw sequences on every
    run and under every worker count; distinct paths yield streams that
    are independent by construction (numpy SeedSequence spawn keys).

    Typical paths are (cell_index, replicate_index) or extensions such as
    (cell_index, replicate_index, arm_index).
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed!r}")
        path = tuple(int(p) for p in self.path)
        if any(p < 0 for p in path):
            raise ValueError(f"path entries must be nonnegative, got {self.path!r}")
        object.__setattr__(self, "path", path)

    def child(self, *indices: int) -> "RngStream":
        """Derive a sub-stream by appending indices to the path."""
        return RngStream(self.seed, self.path + tuple(indices))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Bracket:
    """Closed interval [lo, hi] handed to the 1-D solvers."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("bracket endpoints must be finite")
        if not self.lo < self.hi:
            raise ValueError(f"bracket requires lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for x > 0.

    Uses libm's lgamma, which is a few ulp tighter than the scipy
    routine in the mid range where the bias-correction factors live.
    """
    if x <= 0:
        raise ValueError(f"log_gamma requires x > 0, got {x}")
    return math.lgamma(x)


def hedges_j(m: float) -> float:
    """Small-sample bias correction J(m) = Gamma(m/2) / (sqrt(m/2) Gamma((m-1)/2)).

    Multiplying a standardized sample mean by J(n - 1) removes its bias
    (Hedges-type correction). J is strictly increasing on (1, inf) with
    J(m) -> 1 as m -> inf.
    """
    if m <= 1:
        raise ValueError(f"hedges_j requires m > 1, got {m}")
    return math.exp(log_gamma(m / 2.0) - 0.5 * math.log(m / 2.0) - log_gamma((m - 1.0) / 2.0))


def _nct_cdf_quad(x: float, df: float, ncp: float) -> float:
    # P(T <= x) = E[Phi(x * sqrt(V/df) - ncp)] with V ~ chi2(df); substituting
    # s = sqrt(v/df) keeps the integrand concentrated near s = 1.
    def integrand(s):
        return stats.norm.cdf(x * s - ncp) * stats.chi2.pdf(df * s * s, df) * 2.0 * df * s

    hi = 1.0 + 12.0 / math.sqrt(df)
    val, _ = integrate.quad(integrand, 0.0, hi, epsabs=1e-12, epsrel=1e-10, limit=400)
    tail, _ = integrate.quad(integrand, hi, np.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
    return min(1.0, max(0.0, val + tail))


def noncentral_t_cdf(x, df: float, ncp: float):
    """CDF of the noncentral t distribution, P(T <= x).

    T = (Z + ncp) / sqrt(V / df) with Z standard normal and V chi-square
    with df degrees of freedom, independent. Reduces to the central t CDF
    at ncp = 0. For very large |ncp| the defining integral is evaluated by
    quadrature instead of the library routine.
    """
    if df <= 0:
        raise ValueError(f"noncentral_t_cdf requires df > 0, got {df}")
    if abs(ncp) > _NCT_QUAD_THRESHOLD:
        xs = np.asarray(x, dtype=float)
        out = np.array([_nct_cdf_quad(float(xi), df, ncp) for xi in np.atleast_1d(xs)])
        return float(out[0]) if xs.ndim == 0 else out.reshape(xs.shape)
    if ncp == 0.0:
        result = stats.t.cdf(x, df)
    else:
        result = stats.nct.cdf(x, df, ncp)
    return float(result) if np.ndim(x) == 0 else result


def sample_noncentral_t(df: float, ncp: float, rng, size=None):
    """Draw from the noncentral t distribution as (Z + ncp)/sqrt(V/df).

    `rng` may be an RngStream (a fresh generator is derived from it) or an
    already-positioned numpy Generator. The draw order (normal, then
    chi-square) is fixed, so identical streams reproduce identical values.
    """
    if df <= 0:
        raise ValueError(f"sample_noncentral_t requires df > 0, got {df}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    z = gen.standard_normal(size)
    v = gen.chisquare(df, size)
    return (z + ncp) / np.sqrt(v / df)


def chi_square_cdf(x, df: float):
    """Chi-square CDF with df > 0 degrees of freedom."""
    if df <= 0:
        raise ValueError(f"chi_square_cdf requires df > 0, got {df}")
    result = stats.chi2.cdf(x, df)
    return float(result) if np.ndim(x) == 0 else result


def chi_square_quantile(p: float, df: float) -> float:
    """Inverse chi-square CDF for p in (0, 1)."""
    if df <= 0:
        raise ValueError(f"chi_square_quantile requires df > 0, got {df}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"chi_square_quantile requires p in (0, 1), got {p}")
    return float(stats.chi2.ppf(p, df))


def normal_quantile(p: float) -> float:
    """Standard normal quantile for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile requires p in (0, 1), got {p}")
    return float(stats.norm.ppf(p))


def student_t_quantile(p: float, df: float) -> float:
    """Student t quantile for p in (0, 1) and df >= 1."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"student_t_quantile requires p in (0, 1), got {p}")
    if df < 1:
        raise ValueError(f"student_t_quantile requires df >= 1, got {df}")
    return float(stats.t.ppf(p, df))


def find_root(f, bracket: Bracket, tol: float = 1e-10, max_expansions: int = 0) -> float:
    """Locate a root of a continuous function inside a sign-changing bracket.

    Uses Brent's method (bisection/secant/inverse-quadratic hybrid); the
    returned abscissa is within `tol` of a sign change. If the initial
    endpoints do not straddle a root, the upper endpoint is pushed out by
    doubling the bracket width up to `max_expansions` times before giving
    up with NoSignChangeError.
    """
    lo, hi = bracket.lo, bracket.hi
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    expansions = 0
    while flo * fhi > 0.0:
        if expansions >= max_expansions:
            raise NoSignChangeError(
                f"no sign change on [{lo}, {hi}] after {expansions} expansions: "
                f"f(lo)={flo:.6g}, f(hi)={fhi:.6g}"
            )
        hi = lo + 2.0 * (hi - lo)
        fhi = f(hi)
        expansions += 1
        if fhi == 0.0:
            return hi
    return float(optimize.brentq(f, lo, hi, xtol=tol, rtol=4.0 * np.finfo(float).eps))


def maximize_1d(f, bracket: Bracket, tol: float = 1e-8) -> tuple[float, float]:
    """Maximize a unimodal function on a closed interval.

    Returns (argmax, max). Derivative-free bounded search; a maximum on the
    boundary is returned as the boundary point itself.
    """
    res = optimize.minimize_scalar(
        lambda x: -f(x),
        bounds=(bracket.lo, bracket.hi),
        method="bounded",
        options={"xatol": tol},
    )
    # The bounded search never evaluates the endpoints exactly; pick the best
    # of interior optimum and both endpoints so boundary maxima come out clean.
    candidates = [(bracket.lo, f(bracket.lo)), (bracket.hi, f(bracket.hi)), (float(res.x), f(float(res.x)))]
    best = max(candidates, key=lambda pair: pair[1])
    return best
