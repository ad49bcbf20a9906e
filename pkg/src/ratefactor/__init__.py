"""Poisson factor models for forecasting call-arrival rate profiles.

Day-by-interval count matrices are reduced to a few factor-score series,
forecast with day-of-week AR(1) models, optionally revised within the day
from early counts, and turned into square-root safety staffing levels.
"""

from .core import (
    IDENTITY,
    LOG,
    SQRT,
    CountMatrix,
    DataError,
    FactorModel,
    Link,
    NumericError,
    apply_factor_model,
    poisson_deviance,
    poisson_loglik,
    quarter_hour_labels,
    read_counts_csv,
)
from .evaluate import MetricReport, RollingSpec, empirical_cdf, interval_report, rmse_mre, run_rolling_exercise, simulation_study
from .factor import AmlConfig, DevianceReductionTable, deviance_reduction_table, fit_factor_model, fit_poisson_glm, truncated_svd
from .scores import RateForecast, ScoreForecastModel, bootstrap_scores, fit_score_model, forecast_rates, forecast_scores, nested_slope_f_test
from .simgen import AddParams, MulParams, fit_two_way_gaussian, generate_add, generate_mul, load_demo_params, simulate
from .staffing import StaffingParams, StaffingPlan, delay_prob_from_theta, staffing_level, theta_from_delay_prob
from .update import PartialDay, PenalizedUpdateConfig, UpdatedForecast, hp_update, one_step_bootstrap_update, penalized_update, select_omega

__version__ = "0.1.0"

__all__ = [
    "AddParams",
    "AmlConfig",
    "CountMatrix",
    "DataError",
    "DevianceReductionTable",
    "FactorModel",
    "IDENTITY",
    "LOG",
    "Link",
    "MetricReport",
    "MulParams",
    "NumericError",
    "PartialDay",
    "PenalizedUpdateConfig",
    "RateForecast",
    "RollingSpec",
    "SQRT",
    "ScoreForecastModel",
    "StaffingParams",
    "StaffingPlan",
    "UpdatedForecast",
    "apply_factor_model",
    "bootstrap_scores",
    "delay_prob_from_theta",
    "deviance_reduction_table",
    "empirical_cdf",
    "fit_factor_model",
    "fit_poisson_glm",
    "fit_score_model",
    "fit_two_way_gaussian",
    "forecast_rates",
    "forecast_scores",
    "generate_add",
    "generate_mul",
    "hp_update",
    "interval_report",
    "load_demo_params",
    "nested_slope_f_test",
    "one_step_bootstrap_update",
    "penalized_update",
    "poisson_deviance",
    "poisson_loglik",
    "quarter_hour_labels",
    "read_counts_csv",
    "rmse_mre",
    "run_rolling_exercise",
    "select_omega",
    "simulate",
    "simulation_study",
    "staffing_level",
    "theta_from_delay_prob",
    "truncated_svd",
]
