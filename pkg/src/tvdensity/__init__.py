"""Penalized log-spline density estimation on [0, 1] with targeted inference.

The package fits univariate densities of the form ``exp(f(x)) / C`` where
``f`` is a truncated power spline with an L1 penalty on its coefficients,
provides pointwise delta-method confidence bands, targets smooth functionals
(moments, survival, quantiles) by one-dimensional likelihood fluctuations,
and includes an ADMM trend-filtering estimator on binned data plus a Monte
Carlo harness for convergence, coverage, and efficiency experiments.
"""

__version__ = "0.1.0"

from .basis import BasisSpec, design_matrix, make_basis_spec, make_knots
from .cv import CvPlan, CvResult, cross_validate, default_lambda_grid, undersmooth
from .dgp import DGP_ORDER, DgpSpec, get_dgp, population_truth, sample, true_cdf, true_density, true_quantile
from .errors import (
    DataError,
    ExperimentError,
    SolverError,
    SupportError,
    TargetingError,
    TvdError,
)
from .harness import ExperimentPlan, load_plan, run_experiments
from .inference import DensityBand, bootstrap_band, delta_method_band
from .model import (
    FittedDensity,
    LogSplineProblem,
    QuadratureGrid,
    load_model,
    neg_log_likelihood,
    save_model,
)
from .solvers import SolverConfig, fit_constrained, fit_penalized
from .targeting import EstimandReport, EstimandSpec, parse_estimand, plugin_estimate, tmle_target
from .trendfilter import TfFit, TfProblem, admm_fit, fused_lasso_prox, make_tf_problem, tfpp_variant

__all__ = [
    "__version__",
    "BasisSpec",
    "design_matrix",
    "make_basis_spec",
    "make_knots",
    "CvPlan",
    "CvResult",
    "cross_validate",
    "default_lambda_grid",
    "undersmooth",
    "DGP_ORDER",
    "DgpSpec",
    "get_dgp",
    "population_truth",
    "sample",
    "true_cdf",
    "true_density",
    "true_quantile",
    "DataError",
    "ExperimentError",
    "SolverError",
    "SupportError",
    "TargetingError",
    "TvdError",
    "ExperimentPlan",
    "load_plan",
    "run_experiments",
    "DensityBand",
    "bootstrap_band",
    "delta_method_band",
    "FittedDensity",
    "LogSplineProblem",
    "QuadratureGrid",
    "load_model",
    "neg_log_likelihood",
    "save_model",
    "SolverConfig",
    "fit_constrained",
    "fit_penalized",
    "EstimandReport",
    "EstimandSpec",
    "parse_estimand",
    "plugin_estimate",
    "tmle_target",
    "TfFit",
    "TfProblem",
    "admm_fit",
    "fused_lasso_prox",
    "make_tf_problem",
    "tfpp_variant",
]
