from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from oracles import density, naive_stock, quad_trig_tail

from incrbid.estimators import CoefficientSet
from incrbid.events import BidEvent, ConversionEvent, EventStore, EventTimeline, RetargetEvent
from incrbid.features import (
    BidContext,
    FeatureConfigError,
    FeatureKey,
    evaluate_stock,
    expand_pairs,
    feature_config_hash,
    incremental_value,
    keys_from_config,
    stock_matrix,
    unit_integrals,
)
from incrbid.kernels import DomainError, FourierSpec, KernelSpec

E1 = KernelSpec.exponential(1.0)
E7 = KernelSpec.exponential(7.0)
ICPT = FeatureKey("Baseline", "intercept")


def bid(t, won=False, submitted=None, p_b=0.5, p_g=0.5, chars=None, view=None, p_view=1.0):
    submitted = won if submitted is None else submitted
    return BidEvent("u", t, 1.0, submitted, 1.0 if submitted else 0.0, p_b, p_g, won,
                    0.7 if won else None, (True if view is None else view) if won else None, p_view,
                    chars or {})


def timeline(bids, retargets=(), convs=(), t0=0.0, t1=100.0):
    return EventTimeline("u", t0, t1, tuple(bids), tuple(convs), tuple(retargets))


def test_no_bids_gives_zero_stock():
    keys = [ICPT, FeatureKey("AdStock", kernel=E1), FeatureKey("GhostBidStock", kernel=E1)]
    fr = evaluate_stock(timeline([]), 5.0, keys)
    assert fr.vector(keys).tolist() == [1.0, 0.0, 0.0]


def test_single_won_impression():
    fr = evaluate_stock(timeline([bid(2.0, won=True)]), 3.0, [FeatureKey("AdStock", kernel=E1)])
    assert list(fr.columns.values())[0] == pytest.approx(math.exp(-1))


def test_gates_for_lost_bid():
    keys = [FeatureKey(c, kernel=E1) for c in ("AdStock", "PotentialAdStock", "GhostBidStock")]
    fr = evaluate_stock(timeline([bid(2.0, submitted=True, p_b=0.4, p_g=0.3)]), 3.0, keys)
    np.testing.assert_allclose(fr.vector(keys), [0.0, 0.4 * math.exp(-1), 0.3 * math.exp(-1)], rtol=1e-14)


def test_strict_gating():
    key = FeatureKey("AdStock", kernel=E1)
    assert evaluate_stock(timeline([bid(2.0, won=True)]), 2.0, [key]).columns[key] == 0.0


def test_outside_window_is_domain_error():
    with pytest.raises(DomainError):
        evaluate_stock(timeline([]), 101.0, [ICPT])


def _mixed_timeline():
    bids = [bid(1.0, won=True, chars={"size": 2.0}, view=False, p_view=0.6),
            bid(2.5, submitted=True, p_b=0.3, p_g=0.4, chars={"size": 0.5}),
            bid(4.0, won=True, chars={"size": 1.5}, p_view=0.8),
            bid(6.0, submitted=False, p_g=0.9),
            bid(9.0, won=True, p_view=0.7, chars={"size": 3.0})]
    rets = [RetargetEvent("u", 0.5), RetargetEvent("u", 3.0, "product"), RetargetEvent("u", 8.0)]
    return timeline(bids, rets)


def _all_keys():
    keys = [ICPT]
    for kern in (E1, E7, KernelSpec.gamma(2, 1.5), KernelSpec.exponential(2.0, 5.0)):
        for cls in ("AdStock", "PotentialAdStock", "GhostBidStock"):
            keys.append(FeatureKey(cls, "unit", kern))
            keys.append(FeatureKey(cls, "size", kern))
    keys += [FeatureKey("AdStock", "unit", E1, FourierSpec(7.0, 1, 1)),
             FeatureKey("AdStock", "size", E7, FourierSpec(7.0, 2, 0)),
             FeatureKey("AdStock", "unit", E1, viewability="realized"),
             FeatureKey("AdStock", "unit", E1, viewability="expected"),
             FeatureKey("PotentialAdStock", "unit", E1, viewability="realized"),
             FeatureKey("RetargetConjunction", "unit", E1, retarget_tau=2.0),
             FeatureKey("RetargetConjunction", "unit", E7, retarget_tau=0.5)]
    return keys


def _oracle_value(tl, t, key):
    if key.stock_class == "Baseline":
        return 1.0
    kd = key.kernel.to_dict()
    return naive_stock(tl.bids, tl.retargets, t, key.stock_class, key.characteristic, kd,
                       None if key.fourier is None else key.fourier.to_dict(), key.retarget_tau,
                       key.viewability)


@pytest.mark.parametrize("t", [3.0, 7.5, 12.0])
def test_matches_naive_oracle(t):
    tl = _mixed_timeline()
    keys = _all_keys()
    fr = evaluate_stock(tl, t, keys)
    for k in keys:
        assert fr.columns[k] == pytest.approx(_oracle_value(tl, t, k), rel=1e-12, abs=1e-15), str(k)


def test_additivity_over_single_event_timelines():
    tl = _mixed_timeline()
    keys = [k for k in _all_keys() if k.stock_class not in ("Baseline", "RetargetConjunction")]
    total = evaluate_stock(tl, 10.0, keys).vector(keys)
    parts = sum(evaluate_stock(timeline([b]), 10.0, keys).vector(keys) for b in tl.bids)
    np.testing.assert_allclose(total, parts, rtol=1e-13, atol=1e-16)


def test_stock_matrix_many_users_matches_per_user():
    rng = np.random.default_rng(0)
    tls = []
    for i in range(30):
        n = int(rng.integers(0, 8))
        bs = [replace(bid(float(t), won=bool(rng.random() < .5)), user_id=f"u{i:02d}")
              for t in np.sort(rng.uniform(0, 50, n))]
        tls.append(EventTimeline(f"u{i:02d}", 0.0, 60.0, tuple(bs)))
    store = EventStore.from_timelines(tls)
    keys = [FeatureKey("AdStock", kernel=E7), FeatureKey("GhostBidStock", kernel=E1)]
    qu = rng.integers(0, 30, 200)
    qt = rng.uniform(0, 60, 200)
    M = stock_matrix(store, qu, qt, keys)
    for r in range(0, 200, 17):
        tl = tls[qu[r]]
        np.testing.assert_allclose(M[r], [_oracle_value(tl, qt[r], k) for k in keys], rtol=1e-12, atol=1e-15)


def test_expand_pairs_oracle():
    ev_user = np.array([0, 0, 0, 1, 1, 3])
    ev_t = np.array([1.0, 2.0, 5.0, 0.5, 4.0, 1.0])
    q_user = np.array([0, 1, 2, 3, 0])
    q_t = np.array([2.0, 10.0, 3.0, 0.5, 5.5])
    qi, ei, counts = expand_pairs(ev_user, ev_t, q_user, q_t)
    pairs = sorted(zip(qi.tolist(), ei.tolist()))
    expected = sorted((q, e) for q in range(5) for e in range(6)
                      if ev_user[e] == q_user[q] and ev_t[e] < q_t[q])
    assert pairs == expected
    assert counts.tolist() == [1, 2, 0, 0, 3]


def test_auction_count_and_time_baselines():
    keys = [FeatureKey("Baseline", "auction_count"), FeatureKey("Baseline", "time", fourier=FourierSpec(24.0, 1, 1))]
    fr = evaluate_stock(_mixed_timeline(), 6.0, keys)
    assert fr.columns[keys[0]] == 3.0
    assert fr.columns[keys[1]] == pytest.approx(math.sin(2 * math.pi * 6 / 24))


def test_event_kind_filter():
    k_all = FeatureKey("RetargetConjunction", "unit", E1, retarget_tau=2.0)
    k_prod = FeatureKey("RetargetConjunction", "unit", E1, retarget_tau=2.0, event_kind="product")
    tl = _mixed_timeline()
    fr = evaluate_stock(tl, 5.0, [k_all, k_prod])
    only = timeline(tl.bids, [r for r in tl.retargets if r.event_kind == "product"])
    assert fr.columns[k_prod] == pytest.approx(evaluate_stock(only, 5.0, [k_all]).columns[k_all], rel=1e-14)
    assert fr.columns[k_all] > fr.columns[k_prod]


# ---------------------------------------------------------------- keys and config


def test_key_validation():
    with pytest.raises(FeatureConfigError):
        FeatureKey("AdStock")
    with pytest.raises(FeatureConfigError):
        FeatureKey("Bogus", kernel=E1)
    with pytest.raises(FeatureConfigError):
        FeatureKey("RetargetConjunction", kernel=KernelSpec.gamma(2, 1.0), retarget_tau=1.0)
    with pytest.raises(FeatureConfigError):
        FeatureKey("AdStock", kernel=E1, fourier=FourierSpec(7.0, 0, 1))
    with pytest.raises(FeatureConfigError):
        FeatureKey("Baseline", "intercept", kernel=E1)
    with pytest.raises(FeatureConfigError):
        keys_from_config([{"stock_class": "AdStock", "kernel": {"tau": 1.0}}] * 2)
    with pytest.raises(FeatureConfigError):
        keys_from_config([{"stock_class": "AdStock", "kernel": {"tau": -1.0}}])


def test_key_round_trip_and_hash():
    keys = _all_keys()
    back = keys_from_config([k.to_dict() for k in keys])
    assert back == keys
    assert feature_config_hash(back) == feature_config_hash(keys)
    assert feature_config_hash(keys[:-1]) != feature_config_hash(keys)
    assert len({k.canonical() for k in keys}) == len(keys)


# ---------------------------------------------------------------- valuation


def _quad_delta(key, b, retargets=()):
    """Quadrature of the unit ad stock of one won impression (ex ante) over [t_j, inf)."""
    kern = key.kernel
    f = density(kern.family, kern.tau, kern.shape_k, kern.truncation)
    w = 1.0 if key.characteristic == "unit" else b.characteristics.get(key.characteristic, 0.0)
    if key.viewability != "none":
        w *= b.p_viewable
    scale = kern.tau * kern.shape_k
    if key.stock_class == "RetargetConjunction":
        tr = float(key.retarget_tau)
        gate = sum(math.exp(-(b.t_j - r.t_r) / tr) / tr for r in retargets if r.t_r < b.t_j)
        base = f

        def f(u):
            return base(u) * math.exp(-u / tr)
    else:
        gate = 1.0
    om = 0.0 if key.fourier is None else key.fourier.omega
    sine = key.fourier is not None and key.fourier.phase_a == 1
    val, _ = quad_trig_tail(f, 0.0, kern.truncation, om, om * b.t_j, sine, scale)
    return gate * w * val


def test_incremental_value_single_key():
    k = FeatureKey("AdStock", kernel=E1)
    coef = CoefficientSet([ICPT, k], [0.01, 0.003])
    assert incremental_value(bid(5.0, won=True), coef) == pytest.approx(0.003, rel=1e-15)
    assert incremental_value(bid(5.0), CoefficientSet([ICPT, k], [0.0, 0.0])) == 0.0


def test_incremental_value_fourier_mixture():
    keys = [FeatureKey("AdStock", kernel=E1), FeatureKey("AdStock", kernel=E1, fourier=FourierSpec(7.0, 1, 0)),
            FeatureKey("AdStock", kernel=E1, fourier=FourierSpec(7.0, 1, 1))]
    beta = np.array([0.01, 0.002, -0.001])
    b = bid(2.0)
    got = incremental_value(b, CoefficientSet(keys, beta))
    ref = sum(bb * _quad_delta(k, b) for k, bb in zip(keys, beta))
    assert got == pytest.approx(ref, rel=1e-9)


def test_valuation_matches_quadrature_for_every_key_type():
    b = bid(3.3, chars={"size": 1.7}, p_view=0.6)
    rets = (RetargetEvent("u", 1.0), RetargetEvent("u", 2.9))
    keys = [FeatureKey("AdStock", "size", E7),
            FeatureKey("AdStock", "unit", KernelSpec.exponential(2.0, 5.0)),
            FeatureKey("AdStock", "unit", KernelSpec.exponential(2.0, 14.0), FourierSpec(7.0, 1, 1)),
            FeatureKey("AdStock", "unit", KernelSpec.gamma(2, 1.5)),
            FeatureKey("AdStock", "unit", KernelSpec.gamma(3, 0.8), FourierSpec(7.0, 2, 1)),
            FeatureKey("AdStock", "unit", E1, viewability="realized"),
            FeatureKey("RetargetConjunction", "unit", E1, retarget_tau=2.0),
            FeatureKey("RetargetConjunction", "unit", E1, FourierSpec(7.0, 1, 0), retarget_tau=2.0)]
    ctx = BidContext(b, rets)
    for k in keys:
        got = incremental_value(ctx, CoefficientSet([k], [1.0]))
        assert got == pytest.approx(_quad_delta(k, b, rets), rel=1e-7, abs=1e-13), str(k)


def test_controls_have_no_incremental_value():
    keys = [ICPT, FeatureKey("GhostBidStock", kernel=E1), FeatureKey("PotentialAdStock", kernel=E1)]
    assert incremental_value(bid(1.0), CoefficientSet(keys, [1.0, 2.0, 3.0])) == 0.0


def test_ex_ante_purity():
    keys = [FeatureKey("AdStock", "size", E1), FeatureKey("AdStock", "unit", E1, viewability="realized"),
            FeatureKey("RetargetConjunction", "unit", E1, retarget_tau=2.0)]
    coef = CoefficientSet(keys, [0.01, 0.02, 0.03])
    tl = _mixed_timeline()
    j = tl.bids[2]
    base = incremental_value(BidContext.from_timeline(j, tl), coef)
    # mutate the realized viewability, later events and later retargets
    mutated = timeline([b if b.t_j <= j.t_j else replace(b, won_A=False, submitted_B=False, cost_c=None,
                                                          viewable_V=None) for b in tl.bids],
                       list(tl.retargets) + [RetargetEvent("u", 5.0)], [ConversionEvent("u", 4.5)])
    j2 = replace(j, won_A=False, cost_c=None, viewable_V=None)
    assert incremental_value(BidContext.from_timeline(j2, mutated), coef) == base


def test_key_mismatch():
    k = FeatureKey("AdStock", kernel=E1)
    with pytest.raises(FeatureConfigError):
        incremental_value(bid(1.0), CoefficientSet([k], [1.0]), keys=[FeatureKey("AdStock", kernel=E7)])


def test_residual_integrals_decrease_to_zero():
    tl = timeline([bid(1.0, won=True)])
    store = EventStore.from_timelines([tl])
    keys = [FeatureKey("AdStock", kernel=E1), FeatureKey("AdStock", kernel=KernelSpec.gamma(2, 1.0))]
    full = unit_integrals(store, keys)
    np.testing.assert_allclose(full, [[1.0, 1.0]])
    prev = full
    for t in (1.5, 3.0, 10.0, 60.0):
        r = unit_integrals(store, keys, t_from=np.array([t]))
        assert np.all(r <= prev)
        prev = r
    assert np.all(prev < 1e-20)
    with pytest.raises(DomainError):
        unit_integrals(store, keys, t_from=np.array([0.5]))
