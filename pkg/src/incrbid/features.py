"""Continuous-time stock features and impression valuation.

Feature columns are identified by :class:`FeatureKey`.  Stock classes:

``AdStock``
    ``A_j * w_ijk * f(t - t_j)`` summed over won impressions.
``PotentialAdStock``
    ``B_j * Pr(b_j wins) * w_ijk * f(t - t_j)`` over randomized bid intents.
``GhostBidStock``
    ``Pr(g_j wins) * w_ijk * f(t - t_j)`` over every logged intent.
``RetargetConjunction``
    impression ad stock times retargeting event stock, over pairs with
    ``t_r < t_j < t``.
``Baseline``
    ``intercept`` (constant 1), ``time`` (a Fourier term of ``t``) and
    ``auction_count`` (number of bid opportunities before ``t``).

Any stock key may carry a :class:`FourierSpec`, multiplying each
contribution by ``sin``/``cos`` of ``2 pi n t / S``.

Only events strictly before the evaluation time contribute (``A_j = 1(t > t_j)``).
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels as kn
from .events import BidEvent, BidTable, EventStore, EventTimeline, RetargetEvent
from .kernels import FourierSpec, KernelSpec

AD_STOCK = "AdStock"
POTENTIAL_AD_STOCK = "PotentialAdStock"
GHOST_BID_STOCK = "GhostBidStock"
BASELINE = "Baseline"
RETARGET = "RetargetConjunction"
STOCK_CLASSES = (AD_STOCK, POTENTIAL_AD_STOCK, GHOST_BID_STOCK, BASELINE, RETARGET)
BASELINE_KINDS = ("intercept", "time", "auction_count")
VIEW_MODES = ("none", "realized", "expected")


class FeatureConfigError(ValueError):
    """Invalid or inconsistent feature key configuration."""


@dataclass(frozen=True)
class FeatureKey:
    """Identifies one regressor column.

    ``viewability`` selects how the viewability weight enters: ``"none"``;
    ``"realized"`` multiplies ad stock by the ex-post ``V_j`` (training) and
    uses ``Pr(viewable)`` for instruments and valuation; ``"expected"`` uses
    ``Pr(viewable)`` everywhere.
    """

    stock_class: str
    characteristic: str = "unit"
    kernel: KernelSpec | None = None
    fourier: FourierSpec | None = None
    retarget_tau: float | None = None
    viewability: str = "none"
    event_kind: str | None = None

    def __post_init__(self) -> None:
        cls = self.stock_class
        if cls not in STOCK_CLASSES:
            raise FeatureConfigError(f"unknown stock_class {cls!r}")
        if self.viewability not in VIEW_MODES:
            raise FeatureConfigError(f"unknown viewability mode {self.viewability!r}")
        if self.fourier is not None and self.fourier.order_n == 0 and self.fourier.phase_a == 1:
            raise FeatureConfigError("n=0 sine term is identically zero; use the n=0 cosine (constant) term")
        if cls == BASELINE:
            if self.characteristic not in BASELINE_KINDS:
                raise FeatureConfigError(f"baseline characteristic must be one of {BASELINE_KINDS}")
            if self.kernel is not None or self.retarget_tau is not None:
                raise FeatureConfigError("baseline keys take no kernel")
            if (self.characteristic == "time") != (self.fourier is not None):
                raise FeatureConfigError("a 'time' baseline key needs exactly one Fourier term")
            return
        if self.kernel is None:
            raise FeatureConfigError(f"{cls} key needs a kernel")
        if cls == RETARGET:
            if self.retarget_tau is None or not self.retarget_tau > 0:
                raise FeatureConfigError("retarget conjunction needs a positive retarget_tau")
            if self.kernel.family != kn.EXPONENTIAL or self.kernel.truncated:
                raise FeatureConfigError("retarget conjunction needs an untruncated exponential kernel")
        elif self.retarget_tau is not None or self.event_kind is not None:
            raise FeatureConfigError("retarget_tau/event_kind only apply to RetargetConjunction keys")

    @property
    def is_ad_effect(self) -> bool:
        return self.stock_class in (AD_STOCK, RETARGET)

    @property
    def is_intercept(self) -> bool:
        return self.stock_class == BASELINE and self.characteristic == "intercept"

    def canonical(self) -> str:
        parts = [self.stock_class, self.characteristic]
        if self.kernel is not None:
            parts.append(self.kernel.label())
        if self.fourier is not None:
            parts.append(self.fourier.label())
        if self.retarget_tau is not None:
            parts.append(f"retarget(tau={self.retarget_tau:g}" + (
                f",kind={self.event_kind})" if self.event_kind else ")"))
        if self.viewability != "none":
            parts.append(f"view={self.viewability}")
        return "|".join(parts)

    def __str__(self) -> str:
        return self.canonical()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"stock_class": self.stock_class, "characteristic": self.characteristic}
        if self.kernel is not None:
            d["kernel"] = self.kernel.to_dict()
        if self.fourier is not None:
            d["fourier"] = self.fourier.to_dict()
        if self.retarget_tau is not None:
            d["retarget_tau"] = self.retarget_tau
        if self.viewability != "none":
            d["viewability"] = self.viewability
        if self.event_kind is not None:
            d["event_kind"] = self.event_kind
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> FeatureKey:
        try:
            kern = d.get("kernel")
            four = d.get("fourier")
            rt = d.get("retarget_tau")
            return cls(
                stock_class=str(d["stock_class"]),
                characteristic=str(d.get("characteristic", "unit")),
                kernel=None if kern is None else KernelSpec.from_dict(kern),
                fourier=None if four is None else FourierSpec.from_dict(four),
                retarget_tau=None if rt is None else float(rt),
                viewability=str(d.get("viewability", "none")),
                event_kind=d.get("event_kind"),
            )
        except (KeyError, TypeError, kn.KernelError) as exc:
            raise FeatureConfigError(f"bad feature key {dict(d)!r}: {exc}") from exc


def keys_from_config(items: Iterable[Mapping[str, Any]]) -> list[FeatureKey]:
    keys = [FeatureKey.from_dict(d) for d in items]
    seen: set[FeatureKey] = set()
    for k in keys:
        if k in seen:
            raise FeatureConfigError(f"duplicate feature key {k}")
        seen.add(k)
    return keys


def feature_config_hash(keys: Sequence[FeatureKey]) -> str:
    blob = json.dumps([k.to_dict() for k in keys], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FeatureFrame:
    """Regressor values for one user at one time."""

    user_id: str
    t: float
    columns: dict[FeatureKey, float]
    y: float | None = None
    sample_weight: float | None = None

    def vector(self, keys: Sequence[FeatureKey]) -> np.ndarray:
        return np.array([self.columns[k] for k in keys], dtype=float)


# ---------------------------------------------------------------------------
# pair expansion


def _bisect_left_segments(ev_t: np.ndarray, lo: np.ndarray, hi: np.ndarray, q_t: np.ndarray) -> np.ndarray:
    """Vectorized ``bisect_left`` of each ``q_t`` within its slice ``ev_t[lo:hi]``."""
    lo, hi = lo.copy(), hi.copy()
    last = max(len(ev_t) - 1, 0)
    while True:
        act = lo < hi
        if not act.any():
            return lo
        mid = (lo + hi) // 2
        below = act & (ev_t[np.minimum(mid, last)] < q_t)
        lo = np.where(below, mid + 1, lo)
        hi = np.where(act & ~below, mid, hi)


def expand_pairs(ev_user: np.ndarray, ev_t: np.ndarray, q_user: np.ndarray, q_t: np.ndarray):
    """Pair every query ``(user, t)`` with the same user's events strictly before ``t``.

    Events must be sorted by ``(user, t)``.  Returns ``(q_idx, e_idx, counts)``.
    """
    nq = len(q_t)
    q_user = np.asarray(q_user, dtype=np.int64)
    q_t = np.asarray(q_t, dtype=float)
    if nq == 0 or len(ev_t) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(nq, dtype=np.int64)
    start = np.searchsorted(ev_user, q_user, side="left")
    stop = np.searchsorted(ev_user, q_user, side="right")
    hi = _bisect_left_segments(ev_t, start, stop, q_t)
    counts = hi - start
    total = int(counts.sum())
    q_idx = np.repeat(np.arange(nq, dtype=np.int64), counts)
    first = np.cumsum(counts) - counts
    e_idx = np.repeat(start, counts) + (np.arange(total, dtype=np.int64) - np.repeat(first, counts))
    return q_idx, e_idx, counts


def retarget_weights(store: EventStore, tau_r: float, kind: str | None) -> np.ndarray:
    """Per bid: sum over the user's earlier retarget events of ``exp(-(t_j - t_r) / tau_r)``."""
    bids = store.bids
    out = np.zeros(len(bids))
    if len(store.ret_t) == 0 or len(bids) == 0:
        return out
    mask = np.ones(len(store.ret_t), dtype=bool) if kind is None else (store.ret_kind == kind)
    r_user, r_t = store.ret_user[mask], store.ret_t[mask]
    q_idx, e_idx, _ = expand_pairs(r_user, r_t, bids.user, bids.t)
    vals = np.exp(-(bids.t[q_idx] - r_t[e_idx]) / tau_r)
    return np.bincount(q_idx, weights=vals, minlength=len(bids))


class _GateCache:
    def __init__(self, store: EventStore):
        self.store = store
        self._ret: dict[tuple[float, str | None], np.ndarray] = {}

    def retarget(self, tau_r: float, kind: str | None) -> np.ndarray:
        key = (tau_r, kind)
        if key not in self._ret:
            self._ret[key] = retarget_weights(self.store, tau_r, kind)
        return self._ret[key]


def _view_factor(bids: BidTable, key: FeatureKey, ex_ante: bool) -> np.ndarray | float:
    if key.viewability == "none":
        return 1.0
    if key.stock_class in (AD_STOCK, RETARGET) and key.viewability == "realized" and not ex_ante:
        return np.nan_to_num(bids.viewable, nan=0.0)
    return bids.p_viewable


def event_gates(store: EventStore, key: FeatureKey, *, ex_ante: bool = False,
                cache: _GateCache | None = None) -> np.ndarray:
    """Per-bid multiplier (gate x weight x viewability x retarget stock) for a stock key.

    With ``ex_ante=True`` ad-effect keys assume the impression is won and use
    the predicted viewability, matching what is known at bid time.
    """
    bids = store.bids
    w = bids.weight(key.characteristic) * _view_factor(bids, key, ex_ante)
    cls = key.stock_class
    if cls == AD_STOCK:
        gate = np.ones(len(bids)) if ex_ante else bids.won.astype(float)
    elif cls == POTENTIAL_AD_STOCK:
        gate = bids.submitted * bids.p_win_b
    elif cls == GHOST_BID_STOCK:
        gate = bids.p_win_g
    elif cls == RETARGET:
        cache = cache or _GateCache(store)
        base = np.ones(len(bids)) if ex_ante else bids.won.astype(float)
        gate = base * cache.retarget(float(key.retarget_tau), key.event_kind)
    else:
        raise FeatureConfigError("baseline keys have no event gate")
    return np.asarray(gate * w, dtype=float)


def _lag_profile(key: FeatureKey, lag: np.ndarray) -> np.ndarray:
    # time profile of one unit of stock at lag >= 0 (no Fourier factor)
    dens = kn.pdf(key.kernel, lag)
    if key.stock_class == RETARGET:
        dens = dens * np.exp(-lag / key.retarget_tau) / key.retarget_tau
    return dens


def _validate_keys(keys: Sequence[FeatureKey]) -> None:
    if len(set(keys)) != len(keys):
        raise FeatureConfigError("duplicate feature keys")
    for k in keys:
        if not isinstance(k, FeatureKey):
            raise FeatureConfigError(f"not a FeatureKey: {k!r}")


def stock_matrix(store: EventStore, q_user: np.ndarray, q_t: np.ndarray,
                 keys: Sequence[FeatureKey]) -> np.ndarray:
    """Evaluate every key at every query ``(user index, t)``; returns ``(n_query, n_keys)``."""
    _validate_keys(keys)
    q_user = np.asarray(q_user, dtype=np.int64)
    q_t = np.asarray(q_t, dtype=float)
    nq = len(q_t)
    out = np.zeros((nq, len(keys)))
    bids = store.bids
    q_idx, e_idx, counts = expand_pairs(bids.user, bids.t, q_user, q_t)
    lag = q_t[q_idx] - bids.t[e_idx]
    cache = _GateCache(store)
    profiles: dict[tuple, np.ndarray] = {}
    for c, key in enumerate(keys):
        if key.stock_class == BASELINE:
            if key.characteristic == "intercept":
                out[:, c] = 1.0
            elif key.characteristic == "time":
                out[:, c] = key.fourier.term(q_t)
            else:
                out[:, c] = counts
            continue
        pkey = (key.kernel, key.retarget_tau if key.stock_class == RETARGET else None)
        if pkey not in profiles:
            profiles[pkey] = _lag_profile(key, lag)
        vals = event_gates(store, key, cache=cache)[e_idx] * profiles[pkey]
        if key.fourier is not None:
            vals = vals * key.fourier.term(q_t[q_idx])
        out[:, c] = np.bincount(q_idx, weights=vals, minlength=nq)
    return out


def contribution_pairs(store: EventStore, q_user: np.ndarray, q_t: np.ndarray,
                       keys: Sequence[FeatureKey]):
    """Per-(query, bid) contributions of the stock keys.

    Returns ``(q_idx, e_idx, C)`` where ``C[p, c]`` is bid ``e_idx[p]``'s
    contribution to key ``c`` at query ``q_idx[p]`` (zero for baseline keys).
    Summing ``C`` over pairs of a query reproduces :func:`stock_matrix`.
    """
    q_user = np.asarray(q_user, dtype=np.int64)
    q_t = np.asarray(q_t, dtype=float)
    bids = store.bids
    q_idx, e_idx, _ = expand_pairs(bids.user, bids.t, q_user, q_t)
    lag = q_t[q_idx] - bids.t[e_idx]
    C = np.zeros((len(q_idx), len(keys)))
    cache = _GateCache(store)
    for c, key in enumerate(keys):
        if key.stock_class == BASELINE:
            continue
        vals = event_gates(store, key, cache=cache)[e_idx] * _lag_profile(key, lag)
        if key.fourier is not None:
            vals = vals * key.fourier.term(q_t[q_idx])
        C[:, c] = vals
    return q_idx, e_idx, C


def _single_store(timeline: EventTimeline) -> EventStore:
    return EventStore.from_timelines([timeline])


def evaluate_stock(timeline: EventTimeline, t: float, keys: Sequence[FeatureKey]) -> FeatureFrame:
    """Evaluate ``keys`` for one user at time ``t`` (inside the observation window)."""
    if not timeline.t_start <= t <= timeline.t_end:
        raise kn.DomainError(f"t={t} outside window [{timeline.t_start}, {timeline.t_end}]")
    store = _single_store(timeline)
    row = stock_matrix(store, np.array([0]), np.array([float(t)]), keys)[0]
    return FeatureFrame(timeline.user_id, float(t), {k: float(v) for k, v in zip(keys, row)})


# ---------------------------------------------------------------------------
# time integrals (valuation and residuals)


def unit_integrals(store: EventStore, keys: Sequence[FeatureKey], *, t_from: np.ndarray | None = None,
                   ex_ante: bool = True, bid_idx: np.ndarray | None = None) -> np.ndarray:
    """Per bid and key, the time integral of the bid's contribution from ``t_from`` onward.

    ``t_from=None`` integrates from the bid time (the full incremental value per
    unit coefficient); otherwise ``t_from`` (one value per selected bid, each
    ``>= t_j``) gives the residual.  Non ad-effect keys integrate to zero: they
    are controls whose value does not depend on winning the impression.
    """
    bids = store.bids
    idx = np.arange(len(bids)) if bid_idx is None else np.asarray(bid_idx, dtype=np.int64)
    t_j = bids.t[idx]
    t0 = t_j if t_from is None else np.broadcast_to(np.asarray(t_from, dtype=float), t_j.shape)
    if np.any(t0 < t_j):
        raise kn.DomainError("residual requested before impression time")
    lag = t0 - t_j
    out = np.zeros((len(idx), len(keys)))
    cache = _GateCache(store)
    for c, key in enumerate(keys):
        if not key.is_ad_effect:
            continue
        gate = event_gates(store, key, ex_ante=ex_ante, cache=cache)[idx]
        kern = key.kernel
        if key.stock_class == RETARGET:
            tau, tau_r = kern.tau, float(key.retarget_tau)
            tt = kn.combined_tau(tau, tau_r)
            scale = 1.0 / (tau + tau_r)
            if key.fourier is None:
                prof = scale * np.exp(-lag / tt)
            else:
                prof = scale * kn.fourier_exponential_residual(
                    KernelSpec.exponential(tt), key.fourier, t_j, t0)
        elif key.fourier is None:
            prof = kn.sf(kern, lag)
        else:
            prof = kn.fourier_residual_array(kern, key.fourier, t_j, t0)
        out[:, c] = gate * prof
    return out


@dataclass(frozen=True)
class BidContext:
    """What is known when bidding on opportunity ``bid``: the bid itself plus
    the user's earlier retargeting events."""

    bid: BidEvent
    retargets: tuple[RetargetEvent, ...] = ()

    @classmethod
    def from_timeline(cls, bid: BidEvent, timeline: EventTimeline | None) -> BidContext:
        if timeline is None:
            return cls(bid)
        return cls(bid, tuple(r for r in timeline.retargets if r.t_r < bid.t_j))


def context_store(ctx: BidContext) -> EventStore:
    """Single-bid store holding only ex-ante information (the bid and earlier retargets)."""
    b = ctx.bid
    prefix = tuple(r for r in ctx.retargets if r.t_r < b.t_j)
    t0 = min([b.t_j] + [r.t_r for r in prefix])
    tl = EventTimeline(b.user_id, t0, b.t_j + 1.0, (b,), (), prefix)
    return EventStore.from_timelines([tl])


def check_key_match(keys: Sequence[FeatureKey], coef_keys: Sequence[FeatureKey]) -> None:
    if list(keys) != list(coef_keys):
        missing = set(keys) ^ set(coef_keys)
        raise FeatureConfigError(
            "coefficient keys do not match the feature configuration"
            + (f": {sorted(map(str, missing))[:4]}" if missing else " (order differs)"))


def incremental_value(context: BidContext | BidEvent, coefficients, keys: Sequence[FeatureKey] | None = None,
                      beta: np.ndarray | None = None) -> float:
    """Expected incremental conversions from winning the impression.

    Uses only ex-ante information: the bid time, its characteristic weights,
    predicted viewability and retargeting events before the bid.
    """
    if isinstance(context, BidEvent):
        context = BidContext(context)
    if keys is not None:
        check_key_match(keys, coefficients.keys)
    b = coefficients.beta if beta is None else beta
    U = unit_integrals(context_store(context), coefficients.keys, ex_ante=True)
    return float(U[0] @ b)


def incremental_values(store: EventStore, coefficients, *, ex_ante: bool = True,
                       bid_idx: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`incremental_value` over bids of a store."""
    U = unit_integrals(store, coefficients.keys, ex_ante=ex_ante, bid_idx=bid_idx)
    return U @ coefficients.beta


def frames_from_matrix(store: EventStore, q_user, q_t, M, keys) -> list[FeatureFrame]:
    return [
        FeatureFrame(store.user_ids[int(u)], float(t), {k: float(v) for k, v in zip(keys, row)})
        for u, t, row in zip(q_user, q_t, M)
    ]


__all__ = [
    "AD_STOCK", "POTENTIAL_AD_STOCK", "GHOST_BID_STOCK", "BASELINE", "RETARGET",
    "FeatureKey", "FeatureFrame", "FeatureConfigError", "BidContext",
    "evaluate_stock", "stock_matrix", "contribution_pairs", "unit_integrals",
    "incremental_value", "incremental_values", "keys_from_config", "feature_config_hash",
    "expand_pairs", "retarget_weights", "event_gates",
]
