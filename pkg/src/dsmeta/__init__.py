"""Meta-analysis of the difference of standardized means (DSM).

The DSM standardizes each arm's mean by that arm's own standard
deviation, so unlike the classical standardized mean difference it needs
no common-variance assumption. This package computes study-level effects
with small-sample bias correction, tests heterogeneity under chi-square
and Farebrother approximations, estimates the between-studies variance
(DL, REML, MP, SSC, SMC points; QP, PL, FPC intervals) and the overall
effect (SSW and inverse-variance points; six interval constructions), and
reproduces the factorial simulation study behind those comparisons.
"""

from .effects import (
    ArmSummary,
    MomentPair,
    NORMAL_MOMENTS,
    StudyDsm,
    asymptotic_variance,
    standardized_mean,
    study_dsm,
    study_from_g,
    var_g_hat,
    var_g_true,
)
from .heterogeneity import (
    HetApproximation,
    HetTest,
    QResult,
    WeightScheme,
    cochran_q,
    expected_qf,
    het_test,
    q_f,
    q_iv,
)
from .numerics import Bracket, ConvergenceError, NoSignChangeError, RngStream
from .pooling import (
    EffectEstimate,
    EffectInterval,
    ci_hksj,
    ci_iv_normal,
    ci_ssw,
    pool_iv,
    pool_ssw,
)
from .quadform import QuadFormConvergenceError, QuadFormSpec, eigen_weights, qf_cdf, qf_upper_tail
from .simulation import (
    CellMetrics,
    SimulationCell,
    build_grid,
    equal_cell,
    full_grid,
    generate_replicate,
    run_cell,
    run_grid,
    unequal_cell,
)
from .tau2 import (
    Tau2Estimate,
    Tau2Interval,
    tau2_dl,
    tau2_interval_fpc,
    tau2_interval_pl,
    tau2_interval_qp,
    tau2_mp,
    tau2_reml,
    tau2_smc,
    tau2_ssc,
)

__version__ = "0.1.0"
