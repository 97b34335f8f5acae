"""panelcf: counterfactual estimation for panel data with staggered treatment.

The package fits a low-rank model to the untreated cells of an outcome
panel via nuclear-norm-regularized matrix completion (soft-impute with
singular value thresholding), predicts the untreated counterfactual for
treated unit-periods, and summarizes observed-minus-counterfactual gaps
as event-time treatment effects with bootstrap uncertainty, stratified
effects, cumulative effects, and pre-treatment fit diagnostics.  A
synthetic panel generator with known ground truth supports calibration
and testing.
"""

from .errors import (
    CollinearCovariatesError,
    ConfigError,
    DataError,
    EstimationError,
    PanelcfError,
    UnderIdentifiedError,
)
from .panel import (
    EventView,
    ObservationMask,
    PanelDataset,
    build_mask,
    condition_from_covariate,
    filter_min_pre_periods,
    load_panel,
    load_panel_csv,
    select_covariates,
    to_event_time,
    write_panel_csv,
)
from .completion import (
    CompletionModel,
    CvReport,
    FitConfig,
    PanelFit,
    complete,
    cross_validate,
    fit_panel,
    lambda_grid,
    nuclear_norm,
    residualize_covariates,
    svt,
)
from .effects import (
    BootstrapResult,
    CattResult,
    CumulativeResult,
    EffectSeries,
    StrataSpec,
    bootstrap_se,
    catt,
    cumulative,
    estimate_effects,
    split_eras,
    stratify,
    write_att_csv,
    write_catt_csv,
    write_cumulative_csv,
    write_unit_effects_csv,
)
from .diagnostics import (
    FitReport,
    placebo_in_time,
    pre_fit_report,
    write_fit_report_csv,
)
from .simulate import (
    EffectShape,
    FactorSpec,
    GroundTruth,
    SimConfig,
    default_factors,
    effect_profile,
    generate,
)

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult",
    "CattResult",
    "CollinearCovariatesError",
    "CompletionModel",
    "ConfigError",
    "CumulativeResult",
    "CvReport",
    "DataError",
    "EffectSeries",
    "EffectShape",
    "EstimationError",
    "EventView",
    "FactorSpec",
    "FitConfig",
    "FitReport",
    "GroundTruth",
    "ObservationMask",
    "PanelDataset",
    "PanelFit",
    "PanelcfError",
    "SimConfig",
    "StrataSpec",
    "UnderIdentifiedError",
    "bootstrap_se",
    "build_mask",
    "catt",
    "complete",
    "condition_from_covariate",
    "cross_validate",
    "cumulative",
    "default_factors",
    "effect_profile",
    "estimate_effects",
    "filter_min_pre_periods",
    "fit_panel",
    "generate",
    "lambda_grid",
    "load_panel",
    "load_panel_csv",
    "nuclear_norm",
    "placebo_in_time",
    "pre_fit_report",
    "residualize_covariates",
    "select_covariates",
    "split_eras",
    "stratify",
    "svt",
    "to_event_time",
    "write_att_csv",
    "write_catt_csv",
    "write_cumulative_csv",
    "write_fit_report_csv",
    "write_panel_csv",
    "write_unit_effects_csv",
]
