"""End-to-end acceptance checks; each test logs one PASS/FAIL line."""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from oracles import density, quad_trig_tail
from scipy import integrate

from incrbid import cli
from incrbid import kernels as kn
from incrbid.attribution import campaign_rollup, impression_ledger
from incrbid.bidding import BidPolicy, compute_bids
from incrbid.estimators import CoefficientSet, bayesian_bootstrap, ols
from incrbid.events import BidTable, EventStore
from incrbid.features import FeatureKey
from incrbid.kernels import FourierSpec, KernelSpec
from incrbid.panel import PanelConfig, build_panel
from incrbid.scenarios import run_scenario
from incrbid.simulator import MarketConfig, simulate

pytestmark = pytest.mark.acceptance

ICPT = FeatureKey("Baseline", "intercept")


# ---------------------------------------------------------------- 1


def _rel_err(value, ref, mass):
    if mass == 0.0:
        return 0.0 if abs(value) <= 1e-15 else math.inf
    return abs(value - ref) / max(abs(ref), mass)


def _fourier_draw(rng, i):
    family = ("exponential", "truncated", "gamma")[i % 3]
    tau = float(rng.uniform(0.1, 10.0))
    if family == "gamma":
        k = int(rng.integers(1, 4))
        ker = KernelSpec.gamma(k, tau)
    elif family == "truncated":
        ker = KernelSpec.exponential(tau, truncation=float(rng.uniform(0.5, 5.0)) * tau)
    else:
        ker = KernelSpec.exponential(tau)
    n = int(rng.integers(0, 4))
    four = FourierSpec(float(rng.choice([1.0, 7.0, 86400.0])), n, 0 if n == 0 else int(rng.integers(0, 2)))
    t_j = float(rng.uniform(0.0, 1000.0))
    lag = float(rng.uniform(0.0, 3.0)) * tau * ker.shape_k
    return ker, four, t_j, lag


def _quad(ker, four, t_j, t):
    f = density(ker.family, ker.tau, ker.shape_k, ker.truncation)
    return quad_trig_tail(f, t - t_j, ker.truncation, four.omega, four.omega * t_j, four.phase_a == 1,
                          ker.tau * ker.shape_k)


def _quad_retarget(tau, tau_r, gap, lag):
    def f(u):
        return math.exp(-u / tau) / tau * math.exp(-(gap + u) / tau_r) / tau_r

    val, _ = integrate.quad(f, lag, lag + 80 * tau, epsabs=1e-17, epsrel=1e-12, limit=500)
    mass, _ = integrate.quad(lambda u: math.exp(-u / tau) / tau, lag, lag + 80 * tau, epsabs=1e-17)
    return val, mass * math.exp(-gap / tau_r) / tau_r


def test_criterion_1_closed_forms_match_quadrature(record):
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst, n_checks = 0.0, 0
    for i in range(240):
        ker, four, t_j, lag = _fourier_draw(rng, i)
        ref_d, mass_d = _quad(ker, four, t_j, t_j)
        ref_r, mass_r = _quad(ker, four, t_j, t_j + lag)
        worst = max(worst, _rel_err(kn.fourier_delta(ker, four, t_j), ref_d, mass_d),
                    _rel_err(kn.fourier_residual(ker, four, t_j, t_j + lag), ref_r, mass_r))
        n_checks += 2
    for _ in range(40):
        tau, tau_r = rng.uniform(0.1, 10.0, 2)
        ad, ev = KernelSpec.exponential(tau), KernelSpec.exponential(tau_r)
        t_r = float(rng.uniform(0, 100))
        gap, lag = float(rng.uniform(0, 2)) * tau_r, float(rng.uniform(0, 3)) * tau
        ref_d, mass_d = _quad_retarget(tau, tau_r, gap, 0.0)
        ref_r, mass_r = _quad_retarget(tau, tau_r, gap, lag)
        worst = max(worst, _rel_err(kn.retarget_product_delta(ad, ev, t_r + gap, t_r), ref_d, mass_d),
                    _rel_err(kn.retarget_product_residual(ad, ev, t_r + gap, t_r, t_r + gap + lag), ref_r, mass_r))
        n_checks += 2
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-7 and elapsed < 60,
           f"{n_checks} integrals, worst relative error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_attribution_identities(record):
    ad = FeatureKey("AdStock", kernel=KernelSpec.exponential(600.0))
    ad_size = FeatureKey("AdStock", "size", KernelSpec.exponential(3600.0))
    cfg = MarketConfig(n_users=10_000, alpha_base=0.01 / 3600, true_beta={ad: 0.004, ad_size: 0.001},
                       characteristics={"size": [1.0, 3.0]}, rng_seed=202)
    res = simulate(cfg)
    coef = CoefficientSet([ICPT, ad, ad_size], [cfg.alpha_base, 0.004, 0.001])
    T = cfg.horizon_T
    row = campaign_rollup(res.store, coef, T)[0]
    gap = abs(row["incr_conversion_side"] - row["incr_impression_side"])
    model = row["incr_model_side"]
    se = math.sqrt(model)
    z = (model - res.realized_incremental) / se
    split = 0.0
    for as_of in (T / 3, T / 2, T):
        led = impression_ledger(res.store, coef, as_of)
        split = max(split, float(np.max(np.abs(led.accumulated_cost + led.residual_cost - led.cost))))
    ok = gap <= 1e-9 and abs(z) <= 3 and split <= 1e-9
    record(2, ok, f"side gap {gap:.1e}; model {model:.1f} vs twin {res.realized_incremental} (z={z:+.2f}); "
                  f"cost split {split:.1e}")


# ---------------------------------------------------------------- 3


def test_criterion_3_feedback_endogeneity(record):
    start = time.perf_counter()
    r = run_scenario("fig6", seed=6)
    elapsed = time.perf_counter() - start
    ok = r["hourly_relative_error"] > 0.5 and abs(r["continuous_iv_z"]) <= 3 and elapsed < 600
    record(3, ok, f"hourly OLS off by {100 * r['hourly_relative_error']:.0f}%, continuous IV "
                  f"{r['continuous_iv_mean']:.5f} vs {r['true_beta']} (z={r['continuous_iv_z']:+.2f}), "
                  f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_hcc_drift(record):
    r = run_scenario("fig10", seed=10)
    small, large = r["table"][0], r["table"][-1]
    ok = (small["rmse_hcc_ols"] < small["rmse_hcc_2sls"] and large["rmse_hcc_2sls"] < large["rmse_hcc_ols"])
    cells = "; ".join(f"N={row['n']}: {row['rmse_hcc_ols']:.4f}/{row['rmse_hcc_2sls']:.4f}" for row in r["table"])
    record(4, ok, f"RMSE vs OLS/2SLS {cells}")


# ---------------------------------------------------------------- 5


def test_criterion_5_downsampling(record):
    r = run_scenario("downsample", seed=5)
    beta = r["true_beta"]
    z = {c: (e["mean"] - beta) / e["se_of_mean"] for c, e in r["estimates"].items()}
    ok = r["variance_ratio"] <= 1.15 and all(abs(v) <= 3 for v in z.values())
    record(5, ok, f"variance ratio {r['variance_ratio']:.3f} (theory {r['predicted_ratio']:.3f}); bias z "
                  + ", ".join(f"C={c}: {v:+.2f}" for c, v in z.items()))


# ---------------------------------------------------------------- 6


def test_criterion_6_hausman_calibration(record):
    r = run_scenario("calibration", seed=7)
    ok = 0.03 <= r["null_rejection_rate"] <= 0.08 and r["alt_rejection_rate"] >= 0.95
    record(6, ok, f"null rejection {r['null_rejection_rate']:.3f} over {r['null_reps']}, "
                  f"confounded rejection {r['alt_rejection_rate']:.2f} over {r['alt_reps']}")


# ---------------------------------------------------------------- 7


def test_criterion_7_bootstrap_coverage(record):
    ad = FeatureKey("AdStock", kernel=KernelSpec.exponential(1800.0))
    keys = [ICPT, ad]
    beta = 0.002
    hits = []
    seeds = np.random.SeedSequence(77).generate_state(200)
    for i, s in enumerate(seeds):
        cfg = MarketConfig(n_users=2000, alpha_base=0.02 / 3600, auction_rate=0.5 / 3600,
                           true_beta={ad: beta}, rng_seed=int(s))
        d = build_panel(simulate(cfg).store, keys, PanelConfig(ratio_C=10, rng_seed=int(s) + 1)).design()
        bs = bayesian_bootstrap(ols, d, 20, seed=int(s) + 2, level=0.9)
        hits.append(bs.lower[1] <= beta <= bs.upper[1])
    cov = float(np.mean(hits))
    record(7, 0.85 <= cov <= 0.95, f"90% interval coverage {cov:.3f} over {len(hits)} replications")


# ---------------------------------------------------------------- 8


def _bid_keys():
    keys = [ICPT]
    keys += [FeatureKey("AdStock", kernel=KernelSpec.exponential(60.0 * (i + 1))) for i in range(40)]
    keys += [FeatureKey("AdStock", "size", KernelSpec.exponential(60.0 * (i + 1))) for i in range(20)]
    keys += [FeatureKey("AdStock", kernel=KernelSpec.gamma(2, 30.0 * (i + 1))) for i in range(20)]
    keys += [FeatureKey("AdStock", kernel=KernelSpec.exponential(600.0),
                        fourier=FourierSpec(86400.0, i // 2 + 1, i % 2)) for i in range(19)]
    return keys


def test_criterion_8_bid_throughput(record):
    keys = _bid_keys()
    n, n_users = 100_000, 10_000
    rng = np.random.default_rng(8)
    user = np.sort(rng.integers(0, n_users, n))
    t = rng.uniform(0, 86400.0, n)
    order = np.lexsort((t, user))
    user, t = user[order], t[order]
    zeros, no = np.zeros(n), np.zeros(n, dtype=bool)
    table = BidTable(user=user, t=t, ghost_bid=zeros, submitted=no, bid=zeros, p_win_b=zeros, p_win_g=zeros,
                     won=no, cost=np.full(n, np.nan), viewable=np.full(n, np.nan), p_viewable=np.ones(n),
                     chars={"size": rng.uniform(1, 3, n)})
    store = EventStore([f"u{i}" for i in range(n_users)], np.zeros(n_users), np.full(n_users, 86400.0), table,
                       np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, np.int64),
                       np.zeros(0), np.array([], dtype=object))
    coef = CoefficientSet(keys, rng.uniform(0, 1e-3, len(keys)))
    policy = BidPolicy(50.0, 0.5)
    best = math.inf
    for rep in range(3):
        t0 = time.perf_counter()
        out = compute_bids(store, coef, policy, np.random.default_rng(rep))
        best = min(best, time.perf_counter() - t0)
    rate = n / best
    record(8, rate >= 1e5 and len(out["ghost_bid_g"]) == n,
           f"{rate:,.0f} bid evaluations/s with {len(keys)} keys")


# ---------------------------------------------------------------- 9


REDUCED = {
    "fig6": ["n_reps=2", "n_users=2000"],
    "fig10": ["reps=[4,4,2]", "sizes=[400,800,1600]"],
    "downsample": ["n_reps=3", "n_users=500"],
    "calibration": ["null_reps=5", "alt_reps=2", "alt_n=2000", "n_draws=20", "alt_draws=10"],
}


def test_criterion_9_replicate_determinism(record, tmp_path):
    same = {}
    for name, params in REDUCED.items():
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / f"{name}_{run}"
            argv = ["replicate", name, "--seed", "9", "--out", str(out)]
            for p in params:
                argv += ["--param", p]
            assert cli.main(argv) == 0
            blobs.append((out / f"replicate_{name}.json").read_bytes())
        json.loads(blobs[0])
        same[name] = blobs[0] == blobs[1]
    record(9, all(same.values()), ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
