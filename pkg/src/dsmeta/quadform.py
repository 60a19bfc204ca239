"""Distribution of nonnegative linear combinations of chi-square(1) variables.

A weighted centering quadratic form Q = sum_k w_k (y_k - ybar_w)^2 in
independent normals y_k ~ N(mu, sigma_k^2) reduces to sum_i lambda_i X_i
with X_i iid chi-square(1), where the lambda_i are the eigenvalues of
D^{1/2} A D^{1/2}, D = diag(sigma_k^2) and A = diag(w) - w w'/W. The
centering matrix annihilates the constant vector, so a common mean
contributes no noncentrality and exactly one eigenvalue is zero.

The CDF is evaluated with Ruben's mixture-of-central-chi-squares series
(the expansion behind Farebrother's algorithm), which carries a rigorous
truncation bound; a characteristic-function inversion in the style of
Imhof serves as fallback when the series converges too slowly.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, stats

from .numerics import ConvergenceError

__all__ = [
    "QuadFormConvergenceError",
    "QuadFormSpec",
    "eigen_weights",
    "qf_cdf",
    "qf_upper_tail",
]

# Absolute accuracy target for CDF/tail evaluation.
CDF_TOL = 1e-6
# Series length cap before switching to characteristic-function inversion.
MAX_TERMS = 10_000
# Eigenvalues below this fraction of the largest are clamped to zero:
# the centering matrix is exactly rank K-1, so one zero (plus floating-point
# dust) is expected.
EIGEN_CLAMP = 1e-10


class QuadFormConvergenceError(ConvergenceError):
    """CDF evaluation could not reach the accuracy target.

    The `bound` attribute carries the error bound that was achieved.
    """

    def __init__(self, message: str, bound: float):
        super().__init__(message)
        self.bound = bound


@dataclass(frozen=True)
class QuadFormSpec:
    """Eigenvalue weights of a linear combination of chi-square(1) variables.

    `lambdas` holds all K eigenvalues in descending order, including the
    structural zero(s); zero entries contribute a point mass at the origin
    and are skipped during CDF evaluation.
    """

    lambdas: tuple[float, ...]

    def __post_init__(self):
        if len(self.lambdas) == 0:
            raise ValueError("QuadFormSpec requires at least one eigenvalue")
        if any(lam < 0.0 or not math.isfinite(lam) for lam in self.lambdas):
            raise ValueError(f"eigenvalues must be nonnegative and finite, got {self.lambdas}")
        object.__setattr__(self, "lambdas", tuple(sorted((float(l) for l in self.lambdas), reverse=True)))

    @property
    def positive(self) -> np.ndarray:
        return np.array([lam for lam in self.lambdas if lam > 0.0])

    @property
    def trace(self) -> float:
        return float(sum(self.lambdas))


def eigen_weights(weights, variances) -> QuadFormSpec:
    """Eigenvalues of the centering quadratic form with plug-in variances.

    Parameters
    ----------
    weights : array-like of positive floats
        The w_k of Q = sum w_k (y_k - ybar_w)^2.
    variances : array-like of positive floats
        Per-component normal variances (whatever the caller plugs in:
        conditional variances, or conditional variances plus a
        between-component variance).

    Returns
    -------
    QuadFormSpec
        All K eigenvalues of D^{1/2} A D^{1/2}; their sum equals the trace
        sum_k w_k sigma_k^2 (1 - w_k / W) exactly.
    """
    w = np.asarray(weights, dtype=float)
    s2 = np.asarray(variances, dtype=float)
    if w.ndim != 1 or s2.ndim != 1 or w.shape != s2.shape:
        raise ValueError(f"weights and variances must be equal-length vectors, got shapes {w.shape} and {s2.shape}")
    if w.size < 2:
        raise ValueError(f"need at least 2 components, got {w.size}")
    if np.any(w <= 0) or np.any(s2 <= 0) or not (np.all(np.isfinite(w)) and np.all(np.isfinite(s2))):
        raise ValueError("weights and variances must be positive and finite")

    big_w = w.sum()
    s = np.sqrt(s2)
    ws = w * s
    m = np.diag(w * s2) - np.outer(ws, ws) / big_w
    lam = np.linalg.eigvalsh(m)
    lam_max = float(lam[-1])
    lam = np.where(lam < EIGEN_CLAMP * lam_max, 0.0, lam)
    return QuadFormSpec(tuple(lam))


def _ruben_coefficients(lam: np.ndarray, tol: float, max_terms: int):
    """Mixture coefficients a_k (all positive, summing to 1) for the Ruben
    expansion with scale beta = min(lam).

    Returns (beta, coeffs, mass, converged); converged is False when the
    coefficient mass did not reach 1 - tol within max_terms terms.
    """
    beta = float(lam.min())
    c = 1.0 - beta / lam  # in [0, 1)
    a = np.empty(max_terms)
    a[0] = math.exp(0.5 * float(np.log(beta / lam).sum()))
    total = a[0]
    b = np.empty(max_terms)  # b[m] = 0.5 * sum_j c_j^m, b[0] unused
    c_pow = np.ones_like(c)
    n = 1
    while total < 1.0 - tol:
        if n >= max_terms:
            return beta, a[:n], total, False
        c_pow *= c
        b[n] = 0.5 * float(c_pow.sum())
        # k * a_k = sum_{r<k} b_{k-r} a_r
        a[n] = float(np.dot(b[1 : n + 1][::-1], a[:n])) / n
        total += a[n]
        n += 1
    return beta, a[:n], total, True


def _series_eval(lam: np.ndarray, x: np.ndarray, tol: float, max_terms: int, upper: bool):
    """Evaluate P(sum lam_i chi2_1 <= x) (or the upper tail) by the Ruben series.

    Returns (values, ok, achieved_bound); ok is False when max_terms was hit
    before the truncation bound fell below tol.
    """
    rho = float(len(lam))
    beta, a, mass, converged = _ruben_coefficients(lam, 0.5 * tol, max_terms)
    y = x / beta
    half_y = 0.5 * y

    # Base CDF / survival at rho degrees of freedom, then step df by 2 using
    # F_{v+2}(y) = F_v(y) - (y/2)^{v/2} e^{-y/2} / Gamma(v/2 + 1).
    if upper:
        base = stats.chi2.sf(y, rho)
    else:
        base = stats.chi2.cdf(y, rho)
    g = np.exp(0.5 * rho * np.log(half_y) - half_y - math.lgamma(0.5 * rho + 1.0))

    out = np.zeros_like(y)
    partial = 0.0
    term_cdf = base.copy()
    bound = 1.0
    for k in range(a.size):
        out += a[k] * term_cdf
        partial += a[k]
        # Remaining mass times the largest remaining mixand bounds the error:
        # the chi-square CDF decreases in df (survival increases toward 1).
        if upper:
            bound = 1.0 - partial
            term_next = np.clip(term_cdf + g, 0.0, 1.0)
        else:
            term_next = np.clip(term_cdf - g, 0.0, 1.0)
            bound = (1.0 - partial) * float(np.max(term_next))
        if bound <= tol:
            break
        term_cdf = term_next
        g = g * half_y / (0.5 * rho + k + 1.0)

    ok = converged and bound <= tol
    return np.clip(out, 0.0, 1.0), ok, bound


def _imhof_eval(lam: np.ndarray, x: float, tol: float) -> float:
    """Upper tail by numerical inversion of the characteristic function.

    The inversion integral is accumulated over segments no longer than one
    oscillation; once the phase is monotone the segment contributions
    alternate with shrinking envelope, so the remainder is bounded by the
    last segment.
    """
    lam = np.asarray(lam, dtype=float)
    m = lam.size

    def integrand(u):
        theta = 0.5 * np.sum(np.arctan(lam * u)) - 0.5 * x * u
        rho = np.exp(0.25 * np.sum(np.log1p((lam * u) ** 2)))
        return math.sin(theta) / (u * rho)

    sqrt_prod = math.exp(0.5 * float(np.sum(np.log(lam))))

    def envelope_tail(u0):
        # integral of the envelope 1/(u * prod(1+lam^2 u^2)^(1/4)) beyond u0,
        # using (1 + t^2)^(1/4) >= t^(1/2)
        return (2.0 / m) * u0 ** (-0.5 * m) / sqrt_prod / math.pi

    # |theta'| <= (x + sum lam)/2 everywhere, < x/2 once the arctan terms have
    # flattened out (u > u_osc), where the integral alternates half-period-wise.
    seg_head = 2.0 * math.pi / (x + float(lam.sum()))
    seg_tail = 2.0 * math.pi / x
    u_osc = math.sqrt(float(np.sum(1.0 / lam)) / x) + seg_head
    seg_tol = 0.25 * tol * math.pi
    max_segments = 200_000
    head_segments = u_osc / seg_head
    if head_segments > max_segments:
        # the oscillatory head alone exceeds the budget; refuse upfront
        raise QuadFormConvergenceError(
            f"spectrum too spread for characteristic-function inversion "
            f"({head_segments:.3g} segments needed, budget {max_segments})",
            bound=envelope_tail(max_segments * seg_head),
        )
    acc = 0.0
    u0 = 0.0
    history: list[float] = []
    bound = math.inf
    for _ in range(max_segments):
        in_head = u0 < u_osc
        seg = seg_head if in_head else seg_tail
        val, _ = integrate.quad(integrand, u0, u0 + seg, epsabs=0.01 * seg_tol, limit=200)
        acc += val
        u0 += seg
        if in_head:
            continue
        bound = envelope_tail(u0)
        if bound <= seg_tol:
            break
        history.append(val)
        if len(history) >= 4:
            h = history[-4:]
            alternating = all(h[i] * h[i + 1] < 0.0 for i in range(3))
            shrinking = all(abs(h[i + 1]) <= abs(h[i]) for i in range(3))
            if alternating and shrinking and abs(h[-1]) <= seg_tol:
                bound = abs(h[-1]) / math.pi
                break
    else:
        raise QuadFormConvergenceError(
            f"characteristic-function inversion did not settle after {max_segments} segments "
            f"(error bound {bound:.3g}, target {seg_tol:.3g})",
            bound=bound,
        )
    tail = 0.5 + acc / math.pi
    return min(1.0, max(0.0, tail))


def _evaluate(spec: QuadFormSpec, x, upper: bool, tol: float, max_terms: int):
    lam = spec.positive
    xs = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(xs)):
        raise ValueError("quadratic-form CDF requires finite abscissae")
    scalar = xs.ndim == 0
    xv = np.atleast_1d(xs).astype(float)
    out = np.empty_like(xv)

    nonpos = xv <= 0.0
    out[nonpos] = 1.0 if upper else 0.0

    if lam.size == 0:
        # Degenerate point mass at zero.
        out[~nonpos] = 0.0 if upper else 1.0
        return float(out[0]) if scalar else out.reshape(xs.shape)

    todo = ~nonpos
    if np.any(todo):
        vals, ok, bound = _series_eval(lam, xv[todo], tol, max_terms, upper)
        if ok:
            out[todo] = vals
        else:
            # Series too slow for this spectrum: invert the characteristic
            # function point by point.
            for i in np.nonzero(todo)[0]:
                tail = _imhof_eval(lam, float(xv[i]), tol)
                out[i] = tail if upper else 1.0 - tail
    return float(out[0]) if scalar else out.reshape(xs.shape)


def qf_cdf(spec: QuadFormSpec, x, tol: float = CDF_TOL, max_terms: int = MAX_TERMS):
    """P(sum_i lambda_i chi2_1,i <= x) to absolute accuracy `tol`.

    Accepts a scalar or an array of abscissae; returns 0 for x <= 0.
    Raises QuadFormConvergenceError when neither the series nor the
    fallback inversion reaches the target accuracy.
    """
    return _evaluate(spec, x, upper=False, tol=tol, max_terms=max_terms)


def qf_upper_tail(spec: QuadFormSpec, x, tol: float = CDF_TOL, max_terms: int = MAX_TERMS):
    """P(sum_i lambda_i chi2_1,i > x), accumulated directly from survival
    terms so small tails suffer no cancellation."""
    return _evaluate(spec, x, upper=True, tol=tol, max_terms=max_terms)
