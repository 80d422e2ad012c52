"""Hausman causal correction: a ridge base model corrected by a penalized IV fit of its residual."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .bootstrap import bayesian_bootstrap
from .coefficients import CoefficientSet
from .core import (
    DIAGONAL_TWO_STEP,
    DesignMatrices,
    fit_ridge,
    gmm_iv,
    hausman_statistic,
    moment_objective,
    ols,
    two_sls,
    weighted_mse,
    weighted_r2,
)

DEFAULT_LAMBDA_GRID = (0.0,) + tuple(10.0 ** k for k in range(-4, 5)) + (1e12,)


@dataclass
class HCCPath:
    """Holdout curves behind the selected penalties."""

    ridge_grid: np.ndarray
    ridge_mse: np.ndarray
    hcc_grid: np.ndarray
    hcc_objective: np.ndarray
    beta_corr: np.ndarray
    beta_hcc: np.ndarray


def _argmin(values: np.ndarray) -> int:
    # ties resolve to the first (smallest penalty) grid entry
    return int(np.argmin(np.where(np.isfinite(values), values, np.inf)))


def fit_hcc(design: DesignMatrices, lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
            holdout: DesignMatrices | None = None, *, hcc_grid: Sequence[float] | None = None,
            weighting: str = DIAGONAL_TWO_STEP, hausman_draws: int = 0, seed: int = 0,
            feature_config_hash: str = "", return_path: bool = False):
    """Fit the corrected model.

    1. Ridge of ``Y`` on ``X`` with ``lambda_ridge`` minimizing holdout MSE.
    2. Residual ``e = Y - X beta_corr`` on the training rows.
    3. Penalized GMM of ``e`` on ``X`` instrumented by ``Z`` for each
       ``lambda_hcc``; the value minimizing the holdout identity-weighted
       moment objective of ``beta_corr + beta_hcc`` is kept.

    ``hcc_grid`` defaults to ``lambda_grid``.  With ``hausman_draws >= 2`` the
    Hausman diagnostic compares 2SLS and OLS on the endogenous columns using
    Bayesian-bootstrap variances.
    """
    grid = np.asarray(list(lambda_grid), dtype=float)
    hgrid = grid if hcc_grid is None else np.asarray(list(hcc_grid), dtype=float)
    if grid.size == 0 or hgrid.size == 0:
        raise ValueError("lambda grid is empty")
    if np.any(grid < 0) or np.any(hgrid < 0):
        raise ValueError("lambda grid entries must be non-negative")
    if holdout is None:
        if grid.size > 1 or hgrid.size > 1:
            raise ValueError("a holdout set is required to choose among several penalties")
        holdout = design
    if not np.any(holdout.Y[holdout.Wt > 0] != 0):
        raise ValueError("holdout contains no positive outcomes")

    ridge_fits = [fit_ridge(design, lam) for lam in grid]
    mse = np.array([weighted_mse(holdout, b) for b in ridge_fits])
    i = _argmin(mse)
    lam_r, beta_corr = float(grid[i]), ridge_fits[i]

    resid = design.with_y(design.residual(beta_corr))
    z_std = None
    objs, fits = [], []
    for lam in hgrid:
        res = gmm_iv(resid, lam, weighting)
        z_std = z_std or res.z_standardizer
        beta = beta_corr + res.beta
        fits.append(res)
        objs.append(moment_objective(holdout, beta, z_std))
    objs = np.asarray(objs)
    j = _argmin(objs)
    lam_h = float(hgrid[j])
    beta_hcc = fits[j].beta
    beta = beta_corr + beta_hcc

    diag = {"r_squared": weighted_r2(design, beta), "gmm_objective": float(objs[j]),
            "hausman_H": 0.0, "hausman_dof": 0, "hausman_p": 1.0}
    if hausman_draws >= 2 and np.any(design.endogenous):
        e = design.endogenous
        both = bayesian_bootstrap(lambda d: np.r_[two_sls(d), ols(d)], design, hausman_draws, seed=seed)
        p = design.p
        d_iv, d_ols = both.draws[:, :p][:, e], both.draws[:, p:][:, e]
        hr = hausman_statistic(two_sls(design)[e], ols(design)[e],
                               np.atleast_2d(np.cov(d_iv, rowvar=False)),
                               np.atleast_2d(np.cov(d_ols, rowvar=False)))
        diag.update(hausman_H=hr.H, hausman_dof=hr.dof, hausman_p=hr.p_value)
    coef = CoefficientSet(design.x_keys, beta, lam_r, lam_h, diagnostics=diag,
                          feature_config_hash=feature_config_hash)
    if return_path:
        return coef, HCCPath(grid, mse, hgrid, objs, beta_corr, beta_hcc)
    return coef
