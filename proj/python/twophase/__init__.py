"""Two-phase design and estimation for discrete-time survival models.

The heavy lifting lives in the compiled extension ``twophase._core``; this
package re-exports its public surface.
"""

from twophase._core import (  # noqa: F401
    Allocation,
    ArgumentError,
    Cohort,
    ContinuousRecord,
    CoxFitResult,
    DataError,
    EquivalenceReport,
    EstimatorResult,
    EstimatorSummary,
    FitResult,
    Link,
    MonteCarloSummary,
    NuisanceEstimates,
    NumericError,
    ReplicationRecord,
    ScenarioConfig,
    ScenarioResult,
    StratumInfo,
    StratumKey,
    StratumTable,
    SubjectRecord,
    ThetaParams,
    adaptive_allocation,
    balanced_allocation,
    build_strata,
    calibrate_baseline,
    cox_fit,
    discretize_equivalence_check,
    draw_srs,
    draw_stratified,
    estimator_names,
    fit_mle,
    fit_weighted,
    gen_covariates,
    gen_outcomes,
    gen_surrogate,
    hazard,
    hessian,
    loglik,
    make_cohort,
    mean_score_fit,
    optimal_allocation,
    oracle_nuisance,
    pilot_nuisance,
    run_scenario,
    sandwich_variance,
    score,
    self_check,
    srs_allocation,
    survival_curve,
    undersampled_pilot,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
