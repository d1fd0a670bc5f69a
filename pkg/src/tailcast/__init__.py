"""tailcast: deployment-scale failure forecasting and forecastability training.

A numpy/scipy toolkit for three connected capabilities:

* forecasting the worst score among n deployment-scale draws from the
  top-k order statistics of a small fit sample (the Gumbel-tail method);
* decomposing that forecaster's finite-k error into rank, curvature,
  occupancy, and residual components, with Monte Carlo validation;
* fine-tuning a model so its own risk-score tail becomes forecastable,
  demonstrated on a gridworld RL setting with exact differentiable
  regret.
"""

from . import (
    autodiff,
    baselines,
    decomposition,
    distributions,
    experiment,
    finetune,
    forecaster,
    gridworld,
    optim,
    rng,
)
from .decomposition import (
    DecompositionReport,
    empirical_decomposition,
    estimator_error_mc,
    k_sweep,
    nominal_curvature_coefficient,
    occupancy_probability,
    rank_coefficient_mc,
)
from .distributions import TailDistribution, parse_distribution
from .finetune import IogScope, MetaRunConfig, RunTrace, TaskPair, coverage_analysis, run_finetune
from .forecaster import (
    PlottingScheme,
    RankWeighting,
    ScoreTransform,
    TailFit,
    fit_tail,
    forecast_errors,
    predict_quantile,
)
from .gridworld import EnvParams, GridTask, PolicyNet, TaskBank, optimal_values, regret

__version__ = "0.1.0"

__all__ = [
    "autodiff", "baselines", "decomposition", "distributions", "experiment",
    "finetune", "forecaster", "gridworld", "optim", "rng",
    "DecompositionReport", "empirical_decomposition", "estimator_error_mc",
    "k_sweep", "nominal_curvature_coefficient", "occupancy_probability",
    "rank_coefficient_mc", "TailDistribution", "parse_distribution",
    "IogScope", "MetaRunConfig", "RunTrace", "TaskPair", "coverage_analysis",
    "run_finetune", "PlottingScheme", "RankWeighting", "ScoreTransform",
    "TailFit", "fit_tail", "forecast_errors", "predict_quantile",
    "EnvParams", "GridTask", "PolicyNet", "TaskBank", "optimal_values", "regret",
    "__version__",
]
