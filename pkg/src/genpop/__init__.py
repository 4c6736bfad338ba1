"""Generalize treatment effects from a small study to redefined populations.

The pipeline runs frame -> propensity -> redefine -> estimators ->
diagnostics; :mod:`genpop.simlab` checks the estimators by simulation and
:mod:`genpop.cli` wires everything into reproducible reports.
"""

__version__ = "0.1.0"

from .diagnostics import DiagnosticsReport, b_index, balance_table, diagnose, overlap
from .estimators import (
    ESTIMATORS, BartConfig, PateEstimate, bootstrap_se, estimate, estimate_all, estimate_bart,
    estimate_eblup, estimate_ipw, estimate_outcome_model, estimate_tmle,
)
from .frame import (
    CovariateSchema, CovariateSpec, UnitFrame, filter_policy, indiana_schema, load_csv, load_schema,
    parse_predicates,
)
from .propensity import PropensityFit, fit_propensity, fit_selection, score
from .redefine import crump_alpha, original, trim_covariates, trim_crump, trim_minmax, trim_quantile
from .subpopulation import Subpopulation

__all__ = [
    "__version__", "CovariateSchema", "CovariateSpec", "UnitFrame", "load_csv", "load_schema",
    "indiana_schema", "parse_predicates", "filter_policy", "PropensityFit", "fit_propensity",
    "fit_selection", "score", "Subpopulation", "original", "crump_alpha", "trim_crump", "trim_minmax",
    "trim_quantile", "trim_covariates", "DiagnosticsReport", "b_index", "overlap", "balance_table",
    "diagnose", "ESTIMATORS", "BartConfig", "PateEstimate", "estimate", "estimate_all", "estimate_ipw",
    "estimate_outcome_model", "estimate_tmle", "estimate_eblup", "estimate_bart", "bootstrap_se",
]
