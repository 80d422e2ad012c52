"""Estimators for continuous-time incrementality models."""

from __future__ import annotations

from .bootstrap import BootstrapResult, bayesian_bootstrap, group_weights
from .coefficients import CoefficientSet
from .core import (
    DIAGONAL_TWO_STEP,
    IDENTITY,
    DesignMatrices,
    GMMResult,
    HausmanResult,
    control_function_2sls,
    first_stage,
    fit_ridge,
    gmm_iv,
    hausman_statistic,
    moment_objective,
    ols,
    two_sls,
    weighted_mse,
    weighted_r2,
)
from .hcc import DEFAULT_LAMBDA_GRID, HCCPath, fit_hcc
from .linalg import IdentificationError, NumericError, Standardizer, pcg

__all__ = [
    "BootstrapResult", "bayesian_bootstrap", "group_weights", "CoefficientSet",
    "DIAGONAL_TWO_STEP", "IDENTITY", "DesignMatrices", "GMMResult", "HausmanResult",
    "control_function_2sls", "first_stage", "fit_ridge", "gmm_iv", "hausman_statistic",
    "moment_objective", "ols", "two_sls", "weighted_mse", "weighted_r2",
    "DEFAULT_LAMBDA_GRID", "HCCPath", "fit_hcc", "IdentificationError", "NumericError",
    "Standardizer", "pcg",
]
