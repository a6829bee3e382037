"""Continuous-time marginal structural models with additive hazard weights."""

from .aalen import AalenAdditiveRegression, CumCoef, fit_additive, nelson_aalen
from .core import (
    DesignSpec,
    EventHistory,
    EventRecord,
    StepPath,
    at_risk,
    build_history,
    design_row,
    expand_to_event_grid,
    read_history_csv,
    write_history_csv,
)
from .iptw import LogisticFit, StabilizedIPTW, discretize, fit_pooled_logistic, stabilized_iptw
from .transform import (
    OdeSpec,
    ParamPath,
    PluginEstimator,
    cumulative_incidence_spec,
    identity_spec,
    relative_survival_spec,
    rmst_spec,
    solve_plugin,
    survival_spec,
)
from .weights import (
    AdditiveIntensity,
    CensoringWeights,
    ContinuousTimeWeights,
    ThetaPath,
    WeightSet,
    baseline_weight,
    censoring_weights,
    combine_weights,
    estimate_theta,
    estimate_weights,
    theoretical_weights,
    unit_weights,
)

__version__ = "0.1.0"
