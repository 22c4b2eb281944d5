"""Survival-analysis engine and simulation lab for survivorship bias
arising when treated and control cohorts start follow-up at different
times."""

__version__ = "0.1.0"

from .survcore import (  # noqa: F401
    BiasReport,
    ConvergenceError,
    CoxFit,
    HazardRatio,
    MonotoneLikelihoodError,
    SplineSpec,
    SurvDataError,
    bias_metrics,
    cox_fit,
    default_knots,
    hazard_ratio,
    rcs_basis,
)
from .datagen import (  # noqa: F401
    CalibrationError,
    CalibrationResult,
    CohortData,
    SimulationConfig,
    SimulationError,
    build_counterfactual,
    calibrate_conditional_hr,
    draw_frailty,
    simulate_cohorts,
    simulate_prospective,
    true_marginal_hr,
)
from .estimators import (  # noqa: F401
    APPLICATION_LANDMARKS,
    SIMULATION_LANDMARKS,
    EstimationError,
    EstimationSettings,
    EstimatorResult,
    LandmarkSpec,
    ResultRow,
    build_landmarks,
    estimate_early_treated,
    estimate_left_truncation,
    estimate_matching,
    estimate_median_control,
    estimate_time_varying,
    estimate_unadjusted,
    estimate_wait_covariate,
    reset_time_axis,
    run_all,
)
from .cohortio import (  # noqa: F401
    ResultTable,
    SchemaError,
    read_cohort,
    read_counting_process,
    read_metadata,
    read_results,
    render_text_table,
    validate_counting_process,
    write_cohort,
    write_counting_process,
    write_metadata,
    write_results,
)
