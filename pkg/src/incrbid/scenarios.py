"""End-to-end replication scenarios on synthetic ground truth.

Every scenario takes a seed and size overrides and returns a JSON-serializable
dict; all randomness derives from the seed, so reruns are identical.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from typing import Any

import numpy as np

from .estimators import (
    DesignMatrices,
    bayesian_bootstrap,
    fit_hcc,
    gmm_iv,
    hausman_statistic,
    ols,
    two_sls,
)
from .features import FeatureKey
from .kernels import KernelSpec
from .panel import PanelConfig, build_panel
from .simulator import MarketConfig, simulate


def _seeds(seed: int, n: int, tag: int) -> list[int]:
    ss = np.random.SeedSequence([int(seed), tag])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


# ---------------------------------------------------------------------------
# toy linear IV data


def toy_iv(n: int, rng: np.random.Generator, *, beta: float = 1.0, pi: float = 0.3, rho: float = 0.0,
           n_instruments: int = 1) -> DesignMatrices:
    """``y = 1 + beta x + u``, ``x = pi * sum(z) + v`` with ``corr(u, v) = rho``."""
    z = rng.standard_normal((n, n_instruments))
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    u = e1
    v = rho * e1 + math.sqrt(1 - rho * rho) * e2
    x = pi * z.sum(axis=1) + v
    y = 1.0 + beta * x + u
    return DesignMatrices.build(y, np.ones((n, 1)), x, z)


# ---------------------------------------------------------------------------
# feedback endogeneity


def fig6(seed: int = 0, *, n_reps: int = 50, n_users: int = 100_000, beta: float = 0.005,
         alpha_per_hour: float = 0.01, cooldown: float = 1800.0, tau: float = 600.0,
         bin_seconds: float = 3600.0, ratio_C: float = 10.0) -> dict[str, Any]:
    """Negative-targeting feedback: hourly OLS versus continuous-time IV.

    The continuous model regresses the conversion intensity on ad stock with
    ghost-bid stock as control and potential ad stock as instrument.
    """
    kern = KernelSpec.exponential(tau)
    ad = FeatureKey("AdStock", "unit", kern)
    keys = [FeatureKey("Baseline", "intercept"), FeatureKey("GhostBidStock", "unit", kern), ad,
            FeatureKey("PotentialAdStock", "unit", kern)]
    rows = []
    for rep, s in enumerate(_seeds(seed, n_reps, 6)):
        cfg = MarketConfig(n_users=n_users, alpha_base=alpha_per_hour / 3600.0, alpha_dispersion=1.0,
                           true_beta={ad: beta}, submit_probability_p=0.5, feedback="NegativeTargeting",
                           cooldown=cooldown, rng_seed=s)
        store = simulate(cfg).store
        nb = int(math.ceil(cfg.horizon_T / bin_seconds))
        b = store.bids
        cell_x = b.user[b.won] * nb + (b.t[b.won] // bin_seconds).astype(np.int64)
        cell_y = store.conv_user * nb + (store.conv_t // bin_seconds).astype(np.int64)
        xh = np.bincount(cell_x, minlength=store.n_users * nb).astype(float)
        yh = np.bincount(cell_y, minlength=store.n_users * nb).astype(float)
        hourly = ols(DesignMatrices.build(yh, np.column_stack([np.ones(len(yh)), xh])))[1]
        panel = build_panel(store, keys, PanelConfig(ratio_C=ratio_C, rng_seed=s))
        d = panel.design()
        j = d.x_keys.index(ad)
        cont_iv = gmm_iv(d, 0.0).beta[j]
        cont_ols = ols(d)[j]
        rows.append({"rep": rep, "hourly_ols": float(hourly), "continuous_iv": float(cont_iv),
                     "continuous_ols": float(cont_ols)})
    hourly = np.array([r["hourly_ols"] for r in rows])
    iv = np.array([r["continuous_iv"] for r in rows])
    se = float(iv.std(ddof=1) / math.sqrt(len(iv))) if len(iv) > 1 else float("nan")
    return {
        "scenario": "fig6",
        "true_beta": beta,
        "replications": rows,
        "hourly_ols_mean": float(hourly.mean()),
        "hourly_relative_error": float(abs(hourly.mean() - beta) / beta),
        "continuous_iv_mean": float(iv.mean()),
        "continuous_iv_sd": float(iv.std(ddof=1)) if len(iv) > 1 else float("nan"),
        "continuous_iv_se_of_mean": se,
        "continuous_iv_z": float((iv.mean() - beta) / se) if se > 0 else float("nan"),
    }


# ---------------------------------------------------------------------------
# HCC drift with sample size


FIG10_SIZES = (4000, 43344, 400000)


def fig10(seed: int = 0, *, sizes=FIG10_SIZES, reps=(200, 200, 30), rho: float = 0.022,
          pi: float = 0.3) -> dict[str, Any]:
    """RMSE of HCC against OLS and against 2SLS on the training half, per sample size."""
    table = []
    for n, r in zip(sizes, reps):
        d_ols, d_iv = [], []
        for s in _seeds(seed, r, 10 + n):
            rng = np.random.default_rng(s)
            d = toy_iv(n, rng, rho=rho, pi=pi)
            perm = rng.permutation(n)
            tr, ho = d.take(np.sort(perm[: n // 2])), d.take(np.sort(perm[n // 2:]))
            b = fit_hcc(tr, holdout=ho).beta[1]
            d_ols.append(b - ols(tr)[1])
            d_iv.append(b - two_sls(tr)[1])
        table.append({"n": int(n), "replications": int(r),
                      "rmse_hcc_ols": float(np.sqrt(np.mean(np.square(d_ols)))),
                      "rmse_hcc_2sls": float(np.sqrt(np.mean(np.square(d_iv))))})
    return {"scenario": "fig10", "rho": rho, "pi": pi, "table": table}


# ---------------------------------------------------------------------------
# negative down-sampling


def downsample(seed: int = 0, *, n_reps: int = 200, n_users: int = 4000, ratios=(10.0, 200.0),
               beta: float = 0.002, alpha_per_hour: float = 0.02, tau: float = 1800.0,
               auction_rate_per_hour: float = 0.5) -> dict[str, Any]:
    """Variance of the weighted continuous-time OLS estimate for several negative ratios on shared data."""
    kern = KernelSpec.exponential(tau)
    ad = FeatureKey("AdStock", "unit", kern)
    keys = [FeatureKey("Baseline", "intercept"), ad]
    est = {c: [] for c in ratios}
    for s in _seeds(seed, n_reps, 55):
        cfg = MarketConfig(n_users=n_users, alpha_base=alpha_per_hour / 3600.0, true_beta={ad: beta},
                           auction_rate=auction_rate_per_hour / 3600.0, submit_probability_p=0.5, rng_seed=s)
        store = simulate(cfg).store
        for c in ratios:
            p = build_panel(store, keys, PanelConfig(ratio_C=c, rng_seed=s + 1))
            est[c].append(float(ols(p.design())[1]))
    out = {"scenario": "downsample", "true_beta": beta, "ratios": list(ratios), "estimates": {}}
    for c in ratios:
        a = np.array(est[c])
        out["estimates"][str(c)] = {"mean": float(a.mean()), "var": float(a.var(ddof=1)),
                                    "se_of_mean": float(a.std(ddof=1) / math.sqrt(len(a)))}
    lo, hi = min(ratios), max(ratios)
    out["variance_ratio"] = out["estimates"][str(lo)]["var"] / out["estimates"][str(hi)]["var"]
    out["predicted_ratio"] = (1 + 1 / lo) / (1 + 1 / hi)
    return out


# ---------------------------------------------------------------------------
# Hausman calibration


def _hausman_p(d: DesignMatrices, n_draws: int, seed: int) -> float:
    bs = bayesian_bootstrap(lambda dd: np.r_[two_sls(dd), ols(dd)], d, n_draws, seed=seed)
    p = d.p
    e = d.endogenous
    vi = np.atleast_2d(np.cov(bs.draws[:, :p][:, e], rowvar=False))
    vo = np.atleast_2d(np.cov(bs.draws[:, p:][:, e], rowvar=False))
    return hausman_statistic(two_sls(d)[e], ols(d)[e], vi, vo).p_value


def calibration(seed: int = 0, *, null_reps: int = 500, null_n: int = 1000, alt_reps: int = 50,
                alt_n: int = 50_000, alt_rho: float = 0.8, n_draws: int = 200, alt_draws: int = 50,
                pi: float = 0.5, level: float = 0.05) -> dict[str, Any]:
    """Rejection rates of the bootstrap Hausman test under exogeneity and strong confounding."""
    p_null = []
    for s in _seeds(seed, null_reps, 77):
        rng = np.random.default_rng(s)
        p_null.append(_hausman_p(toy_iv(null_n, rng, pi=pi), n_draws, s))
    p_alt = []
    for s in _seeds(seed, alt_reps, 78):
        rng = np.random.default_rng(s)
        p_alt.append(_hausman_p(toy_iv(alt_n, rng, pi=pi, rho=alt_rho), alt_draws, s))
    return {"scenario": "calibration", "level": level,
            "null_rejection_rate": float(np.mean(np.array(p_null) < level)),
            "alt_rejection_rate": float(np.mean(np.array(p_alt) < level)),
            "null_reps": null_reps, "alt_reps": alt_reps}


SCENARIOS: dict[str, Callable[..., dict[str, Any]]] = {
    "fig6": fig6, "fig10": fig10, "downsample": downsample, "calibration": calibration,
}


def run_scenario(name: str, seed: int = 0, **overrides) -> dict[str, Any]:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    out = SCENARIOS[name](seed, **overrides)
    out["seed"] = seed
    return out
