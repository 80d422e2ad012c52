"""Truthful second-price bids from incremental values, with randomized submission.

The ghost bid is the value of winning: ``g = m*v * delta_y``.  Submission is
randomized either per bid (``B ~ Bernoulli(p)``) or per user (a persistent
uniform ``U_i < p``), which keeps the first stage of the causal model
identified.  With Thompson sampling the valuation uses one bootstrap draw of
the coefficients, chosen per bid (default) or per user.
"""

from __future__ import annotations

import hashlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from .events import BidEvent, EventStore
from .features import BidContext, check_key_match, context_store, unit_integrals

BID_LEVEL = "BidLevel"
USER_LEVEL = "UserLevel"
TRUTHFUL_SECOND_PRICE = "TruthfulSecondPrice"


class BidPolicyError(ValueError):
    pass


@dataclass(frozen=True)
class BidPolicy:
    margin_value_mv: float
    submit_probability_p: float = 1.0
    randomization_level: str = BID_LEVEL
    strategy: str = TRUTHFUL_SECOND_PRICE
    two_point_floor: bool = True  # False submits every positive valuation (no exploration)
    thompson: bool = False
    thompson_unit: str = "bid"  # or "user"

    def __post_init__(self) -> None:
        if not 0 < self.submit_probability_p <= 1:
            raise BidPolicyError("submit_probability_p must lie in (0, 1]")
        if self.randomization_level not in (BID_LEVEL, USER_LEVEL):
            raise BidPolicyError("randomization_level must be BidLevel or UserLevel")
        if self.strategy != TRUTHFUL_SECOND_PRICE:
            raise BidPolicyError("only TruthfulSecondPrice bidding is supported")
        if self.thompson_unit not in ("bid", "user"):
            raise BidPolicyError("thompson_unit must be 'bid' or 'user'")
        if not self.margin_value_mv >= 0:
            raise BidPolicyError("margin_value_mv must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BidPolicy:
        try:
            return cls(**dict(d))
        except TypeError as exc:
            raise BidPolicyError(str(exc)) from exc


@dataclass(frozen=True)
class BidDecision:
    ghost_bid_g: float
    submitted_B: bool
    submitted_bid_b: float
    draw_index: int | None
    negative_value: bool = False


@dataclass
class BidCounters:
    negative_value: int = 0
    n_bids: int = 0


def user_uniform(user_id: str, seed: int) -> float:
    """Persistent per-user uniform, stable across processes and batches."""
    h = hashlib.sha256(f"{seed}:{user_id}".encode()).digest()
    return (int.from_bytes(h[:8], "big") >> 11) / float(1 << 53)


def _user_draw(user_id: str, seed: int, n_draws: int) -> int:
    h = hashlib.sha256(f"draw:{seed}:{user_id}".encode()).digest()
    return int.from_bytes(h[:8], "big") % n_draws


def compute_bid(context: BidContext | BidEvent, coefficients, policy: BidPolicy,
                rng: np.random.Generator, *, seed: int = 0, counters: BidCounters | None = None,
                keys: Sequence | None = None) -> BidDecision:
    """Bid for one opportunity; randomness comes from ``rng`` (and ``seed`` for user-level units)."""
    if isinstance(context, BidEvent):
        context = BidContext(context)
    store = context_store(context)
    out = compute_bids(store, coefficients, policy, rng, seed=seed, counters=counters, keys=keys)
    return BidDecision(float(out["ghost_bid_g"][0]), bool(out["submitted_B"][0]),
                       float(out["submitted_bid_b"][0]),
                       None if out["draw_index"][0] < 0 else int(out["draw_index"][0]),
                       bool(out["negative_value"][0]))


def compute_bids(store: EventStore, coefficients, policy: BidPolicy, rng: np.random.Generator, *,
                 seed: int = 0, counters: BidCounters | None = None, keys: Sequence | None = None,
                 bid_idx: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Vectorized bids for the bid opportunities of ``store``."""
    if keys is not None:
        check_key_match(keys, coefficients.keys)
    b = store.bids
    idx = np.arange(len(b)) if bid_idx is None else np.asarray(bid_idx)
    n = len(idx)
    U = unit_integrals(store, coefficients.keys, ex_ante=True, bid_idx=idx)
    draw = np.full(n, -1, dtype=np.int64)
    if policy.thompson and coefficients.n_draws > 0:
        if policy.thompson_unit == "bid":
            draw = rng.integers(0, coefficients.n_draws, size=n)
        else:
            draw = np.array([_user_draw(store.user_ids[u], seed, coefficients.n_draws) for u in b.user[idx]],
                            dtype=np.int64)
        value = np.einsum("ij,ij->i", U, coefficients.draws[draw])
    else:
        value = U @ coefficients.beta
    g = policy.margin_value_mv * value
    neg = g < 0
    g = np.where(neg, 0.0, g)
    if not policy.two_point_floor:
        B = np.ones(n, dtype=bool)
    elif policy.randomization_level == BID_LEVEL:
        B = rng.random(n) < policy.submit_probability_p
    else:
        uu = {u: user_uniform(store.user_ids[u], seed) for u in np.unique(b.user[idx])}
        B = np.array([uu[u] for u in b.user[idx]]) < policy.submit_probability_p
    # a zero valuation abstains whatever the randomization says
    submit = B & (g > 0)
    bid = np.where(submit, g, 0.0)
    if counters is not None:
        counters.negative_value += int(neg.sum())
        counters.n_bids += n
    return {"ghost_bid_g": g, "submitted_B": submit, "randomized_B": B, "submitted_bid_b": bid,
            "draw_index": draw, "negative_value": neg}
