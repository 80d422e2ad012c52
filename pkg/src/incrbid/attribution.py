"""Incrementality shares for conversions and time-resolved accounting for impressions.

For a conversion at ``t_c`` the predicted intensity splits into a baseline part
(baseline and control columns) and an ad part (ad-effect columns).  Each
earlier impression's share is its own ad contribution over the total, so the
impression shares of one conversion add up to the conversion's share.

Impression accounting at time ``t`` uses the realized partial share (sum of
its shares in conversions up to ``t``), the residual expected effect of its
undissipated ad stock, and splits its cost in the same proportion.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .events import EventStore, EventTimeline
from .features import contribution_pairs, stock_matrix, unit_integrals

REPORT_COLUMNS = (
    "slice", "n_users", "n_impressions", "cost", "accumulated_cost", "residual_cost",
    "incr_conversion_side", "incr_impression_side", "incr_model_side", "expected_cpia_s",
    "expected_cpia_partial", "residual_incrementality", "lift", "n_conversions",
    "n_negative_effect", "n_zero_denominator",
)


class DegeneratePredictionError(ValueError):
    """Predicted conversion intensity is not positive at a conversion time."""

    def __init__(self, message: str, values: np.ndarray | None = None):
        super().__init__(message)
        self.values = values


@dataclass
class ConversionScores:
    """Shares for every conversion of a store (up to an optional cutoff)."""

    conv_index: np.ndarray  # index into store.conv_*
    baseline: np.ndarray  # predicted baseline intensity at t_c
    ad: np.ndarray  # predicted ad intensity at t_c
    s_ic: np.ndarray
    pair_conv: np.ndarray  # position in conv_index
    pair_bid: np.ndarray  # bid index
    s_ijc: np.ndarray
    negative_effect: np.ndarray

    @property
    def denominator(self) -> np.ndarray:
        return self.baseline + self.ad


def _ad_mask(keys) -> np.ndarray:
    return np.array([getattr(k, "is_ad_effect", False) for k in keys], dtype=bool)


def score_conversions(store: EventStore, coefficients, *, as_of: float | None = None,
                      strict: bool = True) -> ConversionScores:
    """Shares ``s_ic`` and pairwise ``s_ijc`` for all conversions at or before ``as_of``."""
    keys = list(coefficients.keys)
    beta = coefficients.beta
    ad = _ad_mask(keys)
    ci = np.arange(len(store.conv_t)) if as_of is None else np.flatnonzero(store.conv_t <= as_of)
    qu, qt = store.conv_user[ci], store.conv_t[ci]
    X = stock_matrix(store, qu, qt, keys)
    base = X[:, ~ad] @ beta[~ad]
    ad_part = X[:, ad] @ beta[ad]
    den = base + ad_part
    bad = ~(den > 0)
    if strict and np.any(bad):
        raise DegeneratePredictionError(
            f"non-positive predicted intensity at {int(bad.sum())} conversion(s); "
            f"first values baseline={base[bad][:3].tolist()} ad={ad_part[bad][:3].tolist()}",
            np.column_stack([base[bad], ad_part[bad]]))
    q_idx, e_idx, C = contribution_pairs(store, qu, qt, keys)
    contrib = C[:, ad] @ beta[ad]
    safe = np.where(bad, np.nan, den)
    s_ijc = contrib / safe[q_idx]
    s_ic = np.bincount(q_idx, weights=np.nan_to_num(s_ijc), minlength=len(ci)).astype(float)
    s_ic[bad] = np.nan
    keep = np.ones(len(q_idx), bool) if not np.any(bad) else ~bad[q_idx]
    return ConversionScores(ci, base, ad_part, s_ic, q_idx[keep], e_idx[keep], s_ijc[keep],
                            ad_part < 0)


def conversion_shares(timeline: EventTimeline, coefficients, conversion) -> dict[str, Any]:
    """Shares of one conversion (a ``ConversionEvent`` or its index in the timeline)."""
    store = EventStore.from_timelines([timeline])
    if not isinstance(conversion, (int, np.integer)):
        matches = [i for i, c in enumerate(timeline.conversions) if c == conversion]
        if not matches:
            raise KeyError("conversion not found in timeline")
        conversion = matches[0]
    t_c = timeline.conversions[conversion].t_c
    # store conversions are time-sorted like the timeline
    idx = int(np.flatnonzero(store.conv_t == t_c)[0])
    sc = score_conversions(store, coefficients)
    sel = sc.pair_conv == idx
    return {
        "t_c": t_c,
        "s_ic": float(sc.s_ic[idx]),
        "baseline": float(sc.baseline[idx]),
        "ad": float(sc.ad[idx]),
        "negative_effect": bool(sc.negative_effect[idx]),
        "s_ijc": [(float(store.bids.t[j]), float(s)) for j, s in zip(sc.pair_bid[sel], sc.s_ijc[sel])],
    }


@dataclass
class ImpressionLedger:
    """Per won impression accounting at one time ``as_of``."""

    bid_index: np.ndarray
    partial: np.ndarray  # s_ij(t)
    residual: np.ndarray  # r_ij(t)
    delta: np.ndarray  # delta y_ij
    expected_share: np.ndarray  # nan where undefined
    cost: np.ndarray
    residual_cost: np.ndarray  # nan where undefined
    accumulated_cost: np.ndarray
    zero_denominator: np.ndarray


def impression_ledger(store: EventStore, coefficients, as_of: float,
                      scores: ConversionScores | None = None) -> ImpressionLedger:
    """Accounting for every won impression with ``t_j <= as_of``."""
    b = store.bids
    j = np.flatnonzero(b.won & (b.t <= as_of))
    sc = scores if scores is not None else score_conversions(store, coefficients, as_of=as_of)
    in_time = store.conv_t[sc.conv_index[sc.pair_conv]] <= as_of
    part_all = np.bincount(sc.pair_bid[in_time], weights=sc.s_ijc[in_time], minlength=len(b)).astype(float)
    partial = part_all[j]
    keys = coefficients.keys
    beta = coefficients.beta
    delta = unit_integrals(store, keys, ex_ante=False, bid_idx=j) @ beta
    residual = unit_integrals(store, keys, t_from=np.full(len(j), float(as_of)), ex_ante=False,
                              bid_idx=j) @ beta
    realized = delta - residual
    cost = np.nan_to_num(b.cost[j])
    with np.errstate(divide="ignore", invalid="ignore"):
        exp_share = np.where(realized != 0, partial * delta / realized, delta)
        frac = np.where(delta != 0, residual / delta, np.nan)
    zero = (delta == 0) & (cost != 0)
    residual_cost = np.where(delta != 0, cost * frac, np.where(cost == 0, 0.0, np.nan))
    accumulated = cost - residual_cost
    exp_share = np.where(zero, np.nan, exp_share)
    return ImpressionLedger(j, partial, residual, delta, exp_share, cost, residual_cost, accumulated, zero)


@dataclass
class AttributionRecord:
    user_id: str
    impression_ref: float
    as_of_t: float
    s_ij_partial_t: float
    r_ij_t: float
    delta_y_ij: float
    expected_share: float | None
    residual_cost: float | None
    accumulated_cost: float | None
    cost: float
    conversion_ref: float | None = None
    s_ijc: float | None = None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def impression_accounting(timeline: EventTimeline, coefficients, impression, as_of: float) -> AttributionRecord:
    """Accounting record of one won impression (``BidEvent`` or index into ``timeline.bids``)."""
    if not isinstance(impression, (int, np.integer)):
        impression = timeline.bids.index(impression)
    bid = timeline.bids[impression]
    if not bid.won_A:
        raise ValueError("impression accounting needs a won impression")
    if as_of < bid.t_j:
        raise ValueError(f"as_of={as_of} precedes the impression at {bid.t_j}")
    store = EventStore.from_timelines([timeline])
    led = impression_ledger(store, coefficients, as_of)
    # store bids are time-sorted like the timeline
    pos = int(np.flatnonzero(led.bid_index == impression)[0])
    flags = []
    if led.zero_denominator[pos]:
        flags.append("zero_denominator")
    if led.delta[pos] < 0:
        flags.append("negative_effect")

    def opt(v):
        return None if math.isnan(v) else float(v)

    return AttributionRecord(
        timeline.user_id, bid.t_j, float(as_of), float(led.partial[pos]), float(led.residual[pos]),
        float(led.delta[pos]), opt(led.expected_share[pos]), opt(led.residual_cost[pos]),
        opt(led.accumulated_cost[pos]), float(led.cost[pos]), flags=tuple(flags))


# ---------------------------------------------------------------------------
# campaign reports


@dataclass(frozen=True)
class SliceSpec:
    name: str = "all"
    where: Mapping[str, float] = field(default_factory=dict)

    def mask(self, store: EventStore) -> np.ndarray:
        b = store.bids
        m = np.ones(len(b), dtype=bool)
        for k, v in self.where.items():
            m &= b.weight(k) == float(v)
        return m

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SliceSpec:
        return cls(str(d.get("name", "all")), {str(k): float(v) for k, v in dict(d.get("where", {})).items()})


def campaign_rollup(store: EventStore, coefficients, as_of: float,
                    slices: Sequence[SliceSpec] = (SliceSpec(),)) -> list[dict[str, Any]]:
    """Report rows per slice of impressions up to ``as_of``.

    ``incr_conversion_side`` sums the slice impressions' shares over
    conversions; ``incr_impression_side`` sums their partial shares (the two
    agree identically); ``residual_incrementality`` holds the still-pending
    residual and ``incr_model_side`` the expected total ``sum delta y_ij``.
    ``lift`` is the mean ``delta y_ij`` of the slice over the intercept
    ``alpha`` (the ``beta / alpha`` ratio of the single-key model).
    """
    sc = score_conversions(store, coefficients, as_of=as_of, strict=False)
    led = impression_ledger(store, coefficients, as_of, sc)
    b = store.bids
    icpt = [i for i, k in enumerate(coefficients.keys) if getattr(k, "is_intercept", False)]
    alpha = float(coefficients.beta[icpt[0]]) if icpt else float("nan")
    rows = []
    for sl in slices:
        in_slice = sl.mask(store)
        m = in_slice[led.bid_index]
        pm = in_slice[sc.pair_bid]
        conv_side = float(np.sum(sc.s_ijc[pm]))
        imp_side = float(np.sum(led.partial[m]))
        n_imp = int(m.sum())
        cost = float(np.sum(led.cost[m]))
        acc = float(np.nansum(led.accumulated_cost[m]))
        res = float(np.nansum(led.residual_cost[m]))
        exp_s = float(np.nansum(led.expected_share[m]))
        n_conv = len(np.unique(sc.pair_conv[pm]))
        model_side = float(np.sum(led.delta[m]))
        rows.append({
            "slice": sl.name,
            "n_users": int(len(np.unique(b.user[led.bid_index[m]]))),
            "n_impressions": n_imp,
            "cost": cost,
            "accumulated_cost": acc,
            "residual_cost": res,
            "incr_conversion_side": conv_side,
            "incr_impression_side": imp_side,
            "incr_model_side": model_side,
            "expected_cpia_s": cost / exp_s if n_imp and exp_s != 0 else None,
            "expected_cpia_partial": acc / imp_side if n_imp and imp_side != 0 else None,
            "residual_incrementality": float(np.sum(led.residual[m])),
            "lift": model_side / n_imp / alpha if n_imp and alpha > 0 else None,
            "n_conversions": n_conv,
            "n_negative_effect": int(np.sum(led.delta[m] < 0)),
            "n_zero_denominator": int(np.sum(led.zero_denominator[m])),
        })
    return rows


def report_csv(rows: Sequence[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(REPORT_COLUMNS), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                     for k in REPORT_COLUMNS})
    return buf.getvalue()


def report_json(rows: Sequence[Mapping[str, Any]]) -> str:
    return json.dumps(list(rows), sort_keys=True, indent=1) + "\n"
