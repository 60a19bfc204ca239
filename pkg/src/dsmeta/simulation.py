"""Factorial simulation engine for the DSM estimators.

Each cell fixes (K, study sizes, delta_C, Delta, tau2); a replicate draws
per-study true effects Delta_k ~ N(Delta, tau2), sets the treatment-arm
standardized mean to delta_C + Delta_k, and generates each arm's corrected
standardized mean from its scaled noncentral t distribution. Every
requested estimator, test, and interval is applied to every replicate and
aggregated into bias, coverage, and empirical-level metrics with Monte
Carlo standard errors.

Reproducibility: every replicate draws from a counter-based stream keyed
by (cell seed, replicate index), so results are bit-identical for any
worker count and schedule.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .effects import StudyDsm, study_from_g
from .heterogeneity import HetApproximation, het_test
from .numerics import ConvergenceError, RngStream, hedges_j, sample_noncentral_t
from .pooling import ci_hksj, ci_iv_normal, ci_ssw, pool_iv, pool_ssw
from .tau2 import POINT_ESTIMATORS, tau2_interval_fpc, tau2_interval_pl, tau2_interval_qp

__all__ = [
    "ALPHA_GRID",
    "ANALYSES",
    "CellMetrics",
    "DELTA_C_VALUES",
    "DELTA_VALUES",
    "EQUAL_SIZES",
    "K_VALUES",
    "MetricValue",
    "SimulationCell",
    "TAU2_VALUES",
    "UNEQUAL_PATTERNS",
    "build_grid",
    "derive_cell_seed",
    "equal_cell",
    "full_grid",
    "generate_replicate",
    "results_to_rows",
    "run_cell",
    "run_grid",
    "unequal_cell",
]

# Nominal upper tail areas for the empirical-level study.
ALPHA_GRID = (0.005, 0.01, 0.05, 0.1, 0.25, 0.5)

K_VALUES = (5, 10, 30)
EQUAL_SIZES = (20, 40, 100, 250)
UNEQUAL_PATTERNS = {
    30: (12, 16, 18, 20, 84),
    60: (24, 32, 36, 40, 168),
    100: (64, 72, 76, 80, 208),
    160: (124, 132, 136, 140, 268),
}
DELTA_C_VALUES = (-2.5, -1.0, 0.0, 1.0, 2.5)
DELTA_VALUES = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0)
TAU2_VALUES = (0.0, 0.1, 0.5, 1.0, 1.5)

ANALYSES = frozenset({"levels", "tau2_point", "tau2_intervals", "delta_point", "delta_intervals"})

TAU2_POINT_METHODS = ("DL", "REML", "MP", "SSC", "SMC")
TAU2_INTERVAL_METHODS = ("QP", "PL", "FPC")
DELTA_POINT_METHODS = ("SSW", "IV-DL", "IV-REML", "IV-MP")
DELTA_INTERVAL_METHODS = ("DL", "REML", "MP", "HKSJ", "SMC", "SSC")
HET_METHODS = ("ChiSq", "FSSW")

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class SimulationCell:
    """One parameter combination of the factorial design."""

    K: int
    sizes: tuple[int, ...]
    delta_C: float
    Delta: float
    tau2: float
    reps: int
    seed: int
    f: float = 0.5
    regime: str = "equal"
    n_label: float = 0.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be at least 2, got {self.K}")
        if len(self.sizes) != self.K:
            raise ValueError(f"expected {self.K} study sizes, got {len(self.sizes)}")
        if not 0.0 < self.f < 1.0:
            raise ValueError(f"control fraction must be in (0, 1), got {self.f}")
        for n in self.sizes:
            n_c = int(math.floor(self.f * n))
            if n_c < 4 or n - n_c < 4:
                raise ValueError(f"study size {n} leaves an arm below 4 subjects at f={self.f}")
        if self.tau2 < 0.0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")
        if self.reps < 1:
            raise ValueError(f"reps must be positive, got {self.reps}")
        if self.regime not in ("equal", "unequal"):
            raise ValueError(f"regime must be 'equal' or 'unequal', got {self.regime!r}")
        if self.n_label == 0.0:
            object.__setattr__(self, "n_label", float(np.mean(self.sizes)))

    def arm_sizes(self, study: int) -> tuple[int, int]:
        """(n_T, n_C) for one study."""
        n = self.sizes[study]
        n_c = int(math.floor(self.f * n))
        return n - n_c, n_c


def equal_cell(K: int, n: int, delta_C: float, Delta: float, tau2: float, reps: int, seed: int) -> SimulationCell:
    """Cell in which every study has total size n."""
    return SimulationCell(
        K=K, sizes=(n,) * K, delta_C=delta_C, Delta=Delta, tau2=tau2,
        reps=reps, seed=seed, regime="equal", n_label=float(n),
    )


def unequal_cell(K: int, nbar: int, delta_C: float, Delta: float, tau2: float, reps: int, seed: int) -> SimulationCell:
    """Cell using the skewed five-study size pattern with mean nbar,
    repeated K/5 times."""
    if nbar not in UNEQUAL_PATTERNS:
        raise ValueError(
            f"unequal mean size must be one of {sorted(UNEQUAL_PATTERNS)}, got {nbar}"
        )
    if K % 5 != 0:
        raise ValueError(f"unequal designs need K to be a multiple of 5, got {K}")
    pattern = UNEQUAL_PATTERNS[nbar]
    return SimulationCell(
        K=K, sizes=pattern * (K // 5), delta_C=delta_C, Delta=Delta, tau2=tau2,
        reps=reps, seed=seed, regime="unequal", n_label=float(nbar),
    )


def derive_cell_seed(base_seed: int, index: int) -> int:
    """Stable 64-bit sub-seed for the cell at a given grid position."""
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def build_grid(
    regime: str = "equal",
    Ks=K_VALUES,
    ns=None,
    delta_Cs=DELTA_C_VALUES,
    Deltas=DELTA_VALUES,
    tau2s=TAU2_VALUES,
    reps: int = 2000,
    seed: int = 0,
) -> list[SimulationCell]:
    """Cartesian product of the given parameter values, in design order
    (K, n, delta_C, Delta, tau2), each cell with its own derived seed."""
    if ns is None:
        ns = EQUAL_SIZES if regime == "equal" else tuple(sorted(UNEQUAL_PATTERNS))
    make = equal_cell if regime == "equal" else unequal_cell
    cells = []
    index = 0
    for k in Ks:
        for n in ns:
            for dc in delta_Cs:
                for dd in Deltas:
                    for t2 in tau2s:
                        cells.append(
                            make(k, n, dc, dd, t2, reps, derive_cell_seed(seed, index))
                        )
                        index += 1
    return cells


def full_grid(regime: str = "equal", reps: int = 2000, seed: int = 0) -> list[SimulationCell]:
    """The complete factorial design for one size regime (2100 cells)."""
    return build_grid(regime=regime, reps=reps, seed=seed)


def generate_replicate(cell: SimulationCell, rep_index: int) -> list[StudyDsm]:
    """Draw one meta-analysis: K studies with arm-level corrected
    standardized means sampled from their scaled noncentral t laws."""
    gen = RngStream(cell.seed, (int(rep_index),)).generator()
    true_effects = gen.normal(cell.Delta, math.sqrt(cell.tau2), cell.K)
    studies = []
    for k in range(cell.K):
        n_t, n_c = cell.arm_sizes(k)
        delta_t = cell.delta_C + float(true_effects[k])
        t_c = float(sample_noncentral_t(n_c - 1, math.sqrt(n_c) * cell.delta_C, gen))
        t_t = float(sample_noncentral_t(n_t - 1, math.sqrt(n_t) * delta_t, gen))
        g_c = hedges_j(n_c - 1) * t_c / math.sqrt(n_c)
        g_t = hedges_j(n_t - 1) * t_t / math.sqrt(n_t)
        studies.append(study_from_g(g_t, n_t, g_c, n_c))
    return studies


@dataclass(frozen=True)
class MetricValue:
    value: float
    mc_se: float
    n_used: int
    failures: int


class _MeanAggregator:
    """Running mean/SE of per-replicate estimates, minus a fixed truth."""

    def __init__(self, truth: float):
        self.truth = truth
        self.n = 0
        self.failures = 0
        self._sum = 0.0
        self._sumsq = 0.0

    def add(self, value: float):
        self.n += 1
        self._sum += value
        self._sumsq += value * value

    def fail(self):
        self.failures += 1

    def result(self) -> MetricValue:
        if self.n == 0:
            return MetricValue(value=math.nan, mc_se=math.nan, n_used=0, failures=self.failures)
        mean = self._sum / self.n
        var = max(0.0, self._sumsq / self.n - mean * mean)
        se = math.sqrt(var / self.n) if self.n > 1 else math.nan
        return MetricValue(value=mean - self.truth, mc_se=se, n_used=self.n, failures=self.failures)


class _ProportionAggregator:
    """Running proportion (coverage or rejection rate) with binomial SE."""

    def __init__(self):
        self.n = 0
        self.hits = 0
        self.failures = 0

    def add(self, hit: bool):
        self.n += 1
        self.hits += int(hit)

    def fail(self):
        self.failures += 1

    def result(self) -> MetricValue:
        if self.n == 0:
            return MetricValue(value=math.nan, mc_se=math.nan, n_used=0, failures=self.failures)
        p = self.hits / self.n
        return MetricValue(
            value=p, mc_se=math.sqrt(p * (1.0 - p) / self.n), n_used=self.n, failures=self.failures
        )


@dataclass
class CellMetrics:
    """Aggregated metrics for one cell, keyed by method name."""

    cell: SimulationCell
    ci_level: float
    tau2_bias: dict = field(default_factory=dict)
    tau2_coverage: dict = field(default_factory=dict)
    delta_bias: dict = field(default_factory=dict)
    delta_coverage: dict = field(default_factory=dict)
    levels: dict = field(default_factory=dict)  # method -> {alpha: MetricValue}

    def rows(self) -> list[dict]:
        """Long-format records, one per (family, method, metric[, nominal])."""
        c = self.cell
        base = {
            "format_version": FORMAT_VERSION,
            "regime": c.regime,
            "K": c.K,
            "n": c.n_label,
            "f": c.f,
            "delta_C": c.delta_C,
            "Delta": c.Delta,
            "tau2": c.tau2,
            "reps": c.reps,
            "seed": c.seed,
        }

        def rec(family, method, metric, nominal, mv: MetricValue):
            return base | {
                "family": family,
                "method": method,
                "metric": metric,
                "nominal": nominal,
                "value": mv.value,
                "mc_se": mv.mc_se,
                "n_used": mv.n_used,
                "failures": mv.failures,
            }

        out = []
        for method in HET_METHODS:
            per_alpha = self.levels.get(method)
            if not per_alpha:
                continue
            for alpha in sorted(per_alpha):
                mv = per_alpha[alpha]
                out.append(rec("het_test", method, "level", alpha, mv))
                rel = MetricValue(
                    value=(mv.value - alpha) / alpha,
                    mc_se=mv.mc_se / alpha,
                    n_used=mv.n_used,
                    failures=mv.failures,
                )
                out.append(rec("het_test", method, "level_rel_error", alpha, rel))
        for method in TAU2_POINT_METHODS:
            if method in self.tau2_bias:
                out.append(rec("tau2_point", method, "bias", "", self.tau2_bias[method]))
        for method in TAU2_INTERVAL_METHODS:
            if method in self.tau2_coverage:
                out.append(rec("tau2_interval", method, "coverage", self.ci_level, self.tau2_coverage[method]))
        for method in DELTA_POINT_METHODS:
            if method in self.delta_bias:
                out.append(rec("delta_point", method, "bias", "", self.delta_bias[method]))
        for method in DELTA_INTERVAL_METHODS:
            if method in self.delta_coverage:
                out.append(rec("delta_interval", method, "coverage", self.ci_level, self.delta_coverage[method]))
        return out


def _tau2_methods_needed(analyses: frozenset) -> tuple[str, ...]:
    needed = []
    if "tau2_point" in analyses:
        needed += list(TAU2_POINT_METHODS)
    if "delta_point" in analyses:
        needed += ["DL", "REML", "MP"]
    if "delta_intervals" in analyses:
        needed += ["DL", "REML", "MP", "SMC", "SSC"]
    return tuple(dict.fromkeys(needed))


def run_cell(cell: SimulationCell, analyses: frozenset = ANALYSES, ci_level: float = 0.95) -> CellMetrics:
    """Run every replicate of one cell and aggregate the requested metrics.

    Estimator failures (non-convergence) are counted per method and the
    failing replicate is excluded from that method's aggregate only.
    Empirical test levels are computed only in null cells (tau2 = 0).
    """
    if cell.reps < 100:
        raise ValueError(f"need at least 100 replications for stable metrics, got {cell.reps}")
    unknown = set(analyses) - ANALYSES
    if unknown:
        raise ValueError(f"unknown analyses {sorted(unknown)}; valid: {sorted(ANALYSES)}")

    metrics = CellMetrics(cell=cell, ci_level=ci_level)
    do_levels = "levels" in analyses and cell.tau2 == 0.0

    level_aggs = {m: {a: _ProportionAggregator() for a in ALPHA_GRID} for m in HET_METHODS}
    level_fail = {m: 0 for m in HET_METHODS}
    tau2_point_aggs = {m: _MeanAggregator(cell.tau2) for m in TAU2_POINT_METHODS}
    tau2_cov_aggs = {m: _ProportionAggregator() for m in TAU2_INTERVAL_METHODS}
    delta_point_aggs = {m: _MeanAggregator(cell.Delta) for m in DELTA_POINT_METHODS}
    delta_cov_aggs = {m: _ProportionAggregator() for m in DELTA_INTERVAL_METHODS}

    tau2_needed = _tau2_methods_needed(analyses)

    for rep in range(cell.reps):
        studies = generate_replicate(cell, rep)

        if do_levels:
            for method, approx in (("ChiSq", HetApproximation.CHISQ), ("FSSW", HetApproximation.FSSW)):
                try:
                    p = het_test(studies, approx).p_value
                except ConvergenceError:
                    level_fail[method] += 1
                    for agg in level_aggs[method].values():
                        agg.fail()
                    continue
                for alpha, agg in level_aggs[method].items():
                    agg.add(p <= alpha)

        tau2_estimates = {}
        for method in tau2_needed:
            try:
                tau2_estimates[method] = POINT_ESTIMATORS[method](studies)
            except ConvergenceError:
                tau2_estimates[method] = None

        if "tau2_point" in analyses:
            for method in TAU2_POINT_METHODS:
                est = tau2_estimates[method]
                if est is None:
                    tau2_point_aggs[method].fail()
                else:
                    tau2_point_aggs[method].add(est.value)

        if "tau2_intervals" in analyses:
            for method, fn in (("QP", tau2_interval_qp), ("PL", tau2_interval_pl), ("FPC", tau2_interval_fpc)):
                try:
                    interval = fn(studies, level=ci_level)
                except ConvergenceError:
                    tau2_cov_aggs[method].fail()
                    continue
                tau2_cov_aggs[method].add(interval.contains(cell.tau2))

        if "delta_point" in analyses:
            delta_point_aggs["SSW"].add(pool_ssw(studies).value)
            for method in ("DL", "REML", "MP"):
                est = tau2_estimates[method]
                if est is None:
                    delta_point_aggs[f"IV-{method}"].fail()
                else:
                    delta_point_aggs[f"IV-{method}"].add(pool_iv(studies, est).value)

        if "delta_intervals" in analyses:
            for method in ("DL", "REML", "MP"):
                est = tau2_estimates[method]
                if est is None:
                    delta_cov_aggs[method].fail()
                    continue
                interval = ci_iv_normal(studies, tau2_method=method, level=ci_level, tau2=est)
                delta_cov_aggs[method].add(interval.contains(cell.Delta))
            est = tau2_estimates["DL"]
            if est is None:
                delta_cov_aggs["HKSJ"].fail()
            else:
                interval = ci_hksj(studies, level=ci_level, tau2=est)
                delta_cov_aggs["HKSJ"].add(interval.contains(cell.Delta))
            for method in ("SMC", "SSC"):
                est = tau2_estimates[method]
                if est is None:
                    delta_cov_aggs[method].fail()
                    continue
                interval = ci_ssw(studies, tau2_method=method, level=ci_level, tau2=est)
                delta_cov_aggs[method].add(interval.contains(cell.Delta))

    if do_levels:
        for method in HET_METHODS:
            metrics.levels[method] = {a: agg.result() for a, agg in level_aggs[method].items()}
    if "tau2_point" in analyses:
        metrics.tau2_bias = {m: agg.result() for m, agg in tau2_point_aggs.items()}
    if "tau2_intervals" in analyses:
        metrics.tau2_coverage = {m: agg.result() for m, agg in tau2_cov_aggs.items()}
    if "delta_point" in analyses:
        metrics.delta_bias = {m: agg.result() for m, agg in delta_point_aggs.items()}
    if "delta_intervals" in analyses:
        metrics.delta_coverage = {m: agg.result() for m, agg in delta_cov_aggs.items()}
    return metrics


def _run_cell_args(args) -> CellMetrics:
    cell, analyses, ci_level = args
    return run_cell(cell, analyses=analyses, ci_level=ci_level)


def run_grid(
    cells: list[SimulationCell],
    workers: int = 1,
    analyses: frozenset = ANALYSES,
    ci_level: float = 0.95,
) -> list[CellMetrics]:
    """Run a list of cells, optionally on worker processes.

    Results are ordered like the input and are bit-identical for every
    worker count: each cell's randomness depends only on its own seed.
    """
    if not cells:
        raise ValueError("empty simulation design")
    if workers <= 1:
        return [run_cell(cell, analyses=analyses, ci_level=ci_level) for cell in cells]
    jobs = [(cell, analyses, ci_level) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell_args, jobs))


def results_to_rows(results: list[CellMetrics]) -> list[dict]:
    """Flatten cell metrics into long-format records for CSV emission."""
    rows = []
    for metrics in results:
        rows.extend(metrics.rows())
    return rows
