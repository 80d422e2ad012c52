from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from incrbid.estimators import ols
from incrbid.events import BidEvent, ConversionEvent, EventStore, EventTimeline
from incrbid.features import FeatureKey, evaluate_stock
from incrbid.kernels import KernelSpec
from incrbid.panel import DOUBLE_NEGATIVE, NEGATIVE, POSITIVE, Panel, PanelConfig, PanelError, build_panel
from incrbid.simulator import MarketConfig, simulate

E = KernelSpec.exponential(3.0)
KEYS = [FeatureKey("Baseline", "intercept"), FeatureKey("AdStock", kernel=E), FeatureKey("GhostBidStock", kernel=E)]


def _bid(u, t, won):
    return BidEvent(u, t, 1.0, won, 1.0 if won else 0.0, 0.5, 0.5, won, 0.4 if won else None,
                    True if won else None)


def _tl(u, t0, t1, bids=(), convs=()):
    return EventTimeline(u, t0, t1, tuple(_bid(u, t, w) for t, w in bids),
                         tuple(ConversionEvent(u, t) for t in convs))


def test_weights_single_user():
    p = build_panel([_tl("a", 0.0, 10.0, [(1.0, True)], [4.0])], KEYS, PanelConfig(ratio_C=2))
    assert p.counts == {"positive": 1, "negative": 2, "double_negative": 1}
    assert sorted(p.weight.tolist()) == [-1.0, 1.0, 5.0, 5.0]
    assert p.total_measure_NT == 10.0
    assert p.y[p.kind == POSITIVE].tolist() == [1.0]
    assert np.all(p.y[p.kind != POSITIVE] == 0)


def test_without_double_negatives():
    p = build_panel([_tl("a", 0.0, 10.0, [(1.0, True)], [4.0])], KEYS,
                    PanelConfig(ratio_C=2, add_double_negatives=False))
    assert len(p) == 3 and np.all(p.weight > 0)


def test_no_positives():
    with pytest.raises(PanelError, match="no positives"):
        build_panel([_tl("a", 0.0, 10.0, [(1.0, True)])], KEYS)


def test_invalid_config():
    with pytest.raises(PanelError):
        PanelConfig(ratio_C=0)
    with pytest.raises(PanelError):
        PanelConfig(holdout_fraction=1.0)


def _sim_store(n=400, seed=1):
    ad = FeatureKey("AdStock", kernel=KernelSpec.exponential(1800.0))
    return simulate(MarketConfig(n_users=n, true_beta={ad: 0.002}, alpha_base=0.05 / 3600,
                                 rng_seed=seed)).store


def test_invariants_on_simulated_log():
    store = _sim_store()
    p = build_panel(store, KEYS, PanelConfig(ratio_C=7.5, rng_seed=3))
    c = p.counts
    assert c["positive"] == len(store.conv_t) == c["double_negative"]
    assert c["negative"] == int(np.ceil(7.5 * c["positive"]))
    neg = p.kind == NEGATIVE
    assert np.sum(p.weight[neg]) == pytest.approx(store.total_measure, rel=1e-12)
    # double negatives carry their positive's columns
    pos = np.flatnonzero(p.kind == POSITIVE)
    dn = np.flatnonzero(p.kind == DOUBLE_NEGATIVE)
    np.testing.assert_array_equal(p.X[pos], p.X[dn])
    np.testing.assert_array_equal(p.t[pos], p.t[dn])
    assert np.all(p.weight[dn] == -1.0)
    # negatives inside their user's window
    assert np.all(p.t[neg] >= store.t_start[p.user[neg]]) and np.all(p.t[neg] <= store.t_end[p.user[neg]])
    # canonical order
    order = np.lexsort((p.kind, p.t, p.user))
    np.testing.assert_array_equal(order, np.arange(len(p)))


def test_deterministic():
    store = _sim_store(200)
    a = build_panel(store, KEYS, PanelConfig(rng_seed=5))
    b = build_panel(store, KEYS, PanelConfig(rng_seed=5))
    assert a.to_csv() == b.to_csv()
    assert build_panel(store, KEYS, PanelConfig(rng_seed=6)).to_csv() != a.to_csv()


def test_negative_times_uniform_over_user_time():
    rng = np.random.default_rng(0)
    tls = []
    for i in range(50):
        t0 = rng.uniform(0, 100)
        tls.append(_tl(f"u{i:02d}", t0, t0 + rng.uniform(1, 50), convs=[t0 + 0.5]))
    store = EventStore.from_timelines(tls)
    p = build_panel(store, [KEYS[0]], PanelConfig(ratio_C=200, rng_seed=11))
    neg = p.kind == NEGATIVE
    assert neg.sum() == 10_000
    cum = np.r_[0.0, np.cumsum(store.window_lengths)]
    u = (cum[p.user[neg]] + p.t[neg] - store.t_start[p.user[neg]]) / cum[-1]
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_rows_use_only_past_events():
    store = _sim_store(100)
    p = build_panel(store, KEYS, PanelConfig(rng_seed=2))
    tls = store.to_timelines()
    rng = np.random.default_rng(0)
    for r in rng.choice(len(p), 25, replace=False):
        tl = tls[p.user_ids[p.user[r]]]
        past = EventTimeline(tl.user_id, tl.t_start, tl.t_end, tuple(b for b in tl.bids if b.t_j < p.t[r]))
        fr = evaluate_stock(past, float(p.t[r]), KEYS)
        np.testing.assert_allclose(p.X[r], fr.vector(KEYS), rtol=1e-12, atol=1e-300)


def test_csv_round_trip():
    p = build_panel(_sim_store(100), KEYS, PanelConfig(rng_seed=2))
    q = Panel.from_csv(p.to_csv(), p.sidecar())
    np.testing.assert_array_equal(q.X, p.X)
    np.testing.assert_array_equal(q.weight, p.weight)
    np.testing.assert_array_equal(q.user, p.user)
    assert q.keys == p.keys and q.total_measure_NT == p.total_measure_NT
    assert q.to_csv() == p.to_csv()


def test_split_users_rescales_negative_weights():
    store = _sim_store(300)
    p = build_panel(store, KEYS, PanelConfig(rng_seed=2))
    tr, ho = p.split_users(0.3, seed=1)
    assert not set(tr.user.tolist()) & set(ho.user.tolist())
    assert len(tr) + len(ho) == len(p)
    for part in (tr, ho):
        assert np.sum(part.weight[part.kind == NEGATIVE]) == pytest.approx(part.total_measure_NT, rel=1e-12)
    assert tr.total_measure_NT + ho.total_measure_NT == pytest.approx(p.total_measure_NT)


def test_design_roles():
    keys = KEYS + [FeatureKey("PotentialAdStock", kernel=E)]
    p = build_panel(_sim_store(100), keys, PanelConfig(rng_seed=2))
    d = p.design()
    assert [k.stock_class for k in d.x_keys] == ["Baseline", "GhostBidStock", "AdStock"]
    assert d.Z.shape[1] == 3
    d_ols = p.design(instrumented=False)
    assert d_ols.Z.shape[1] == d_ols.X.shape[1] == 3


@pytest.mark.slow
def test_weighted_ols_recovers_intensity():
    ad = FeatureKey("AdStock", kernel=KernelSpec.exponential(1800.0))
    keys = [KEYS[0], ad]
    est = []
    for s in range(12):
        cfg = MarketConfig(n_users=3000, true_beta={ad: 0.002}, alpha_base=0.02 / 3600,
                           auction_rate=0.5 / 3600, rng_seed=100 + s)
        p = build_panel(simulate(cfg).store, keys, PanelConfig(rng_seed=s))
        est.append(ols(p.design())[1])
    est = np.array(est)
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - 0.002) < 3 * se
