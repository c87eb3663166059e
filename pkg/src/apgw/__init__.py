"""Adapted power generalised Weibull survival models with multi-parameter regression."""

__version__ = "0.1.0"

from .core import (
    ApgwParams,
    HazardShape,
    ShapeTag,
    apgw_chf,
    box_cox_transform,
    chf_supremum,
    classify_shape,
    cum_hazard,
    cure_probability,
    density,
    hazard,
    log_density,
    log_hazard,
    pgw_chf,
    quantile,
    survivor,
)
from .errors import (
    ApgwError,
    ConfigError,
    CovarianceUnavailableError,
    CurePlateauError,
    DataValidationError,
    DomainError,
    LinkOverflowError,
    NoFiniteStartError,
    NonFiniteLikelihoodError,
    NotCureModelError,
    SpecError,
    UnattainableCensoringError,
)
from .inference import (
    CurveKind,
    CurveRequest,
    cure_report,
    curve,
    hazard_ratio_curve,
    model_table,
    quantile_ratio_curve,
    standard_errors,
    wald_ci,
)
from .likelihood import log_likelihood, observed_information, score
from .model import ModelSpec, RegressionCoefficients, SurvivalDataset, pack, unpack
from .optimizer import FitResult, OptimizerConfig, fit, profile_refit, scale_invariant
from .simulate import (
    CovariateLaw,
    ReplicationSummary,
    ScenarioConfig,
    calibrate_censoring,
    study_scenario,
    run_study,
    sample_lifetime,
    simulate_dataset,
)
