"""Training panel: positives at conversion times, weighted uniform negatives, double negatives.

With ``NT`` the total observed user-time, positives get weight 1, each of the
``#neg = ceil(C * #pos)`` negatives gets ``NT / #neg`` and every positive is
duplicated as a ``y = 0`` row with weight -1.  A weighted least-squares fit on
this panel estimates the linear conversion intensity (conversions per unit time).
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .events import EventStore, EventTimeline
from .features import (
    AD_STOCK,
    BASELINE,
    GHOST_BID_STOCK,
    POTENTIAL_AD_STOCK,
    RETARGET,
    FeatureFrame,
    FeatureKey,
    feature_config_hash,
    stock_matrix,
)

POSITIVE, NEGATIVE, DOUBLE_NEGATIVE = 0, 1, 2


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class PanelConfig:
    ratio_C: float = 10.0
    rng_seed: int = 0
    add_double_negatives: bool = True
    holdout_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not self.ratio_C > 0:
            raise PanelError("ratio_C must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise PanelError("holdout_fraction must lie in [0, 1)")


@dataclass
class Panel:
    """Columnar panel; row ``r`` has user ``user_ids[user[r]]`` at time ``t[r]``."""

    keys: tuple[FeatureKey, ...]
    user_ids: list[str]
    user: np.ndarray
    t: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    kind: np.ndarray
    X: np.ndarray
    total_measure_NT: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def counts(self) -> dict[str, int]:
        return {"positive": int(np.sum(self.kind == POSITIVE)),
                "negative": int(np.sum(self.kind == NEGATIVE)),
                "double_negative": int(np.sum(self.kind == DOUBLE_NEGATIVE))}

    def column(self, key: FeatureKey) -> np.ndarray:
        return self.X[:, self.keys.index(key)]

    @property
    def rows(self) -> list[FeatureFrame]:
        return [FeatureFrame(self.user_ids[u], float(t), dict(zip(self.keys, map(float, x))), float(y), float(w))
                for u, t, x, y, w in zip(self.user, self.t, self.X, self.y, self.weight)]

    def take(self, idx: np.ndarray) -> Panel:
        return Panel(self.keys, self.user_ids, self.user[idx], self.t[idx], self.y[idx], self.weight[idx],
                     self.kind[idx], self.X[idx], self.total_measure_NT, dict(self.meta))

    def split_users(self, fraction: float, seed: int = 0) -> tuple[Panel, Panel]:
        """Split by user into ``(train, holdout)``; negative weights are rescaled to each part's user-time."""
        n_users = len(self.user_ids)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x401D]))
        hold = rng.random(n_users) < fraction
        out = []
        measure = self.meta.get("user_measure")
        for flag in (False, True):
            sel = hold[self.user] == flag
            part = self.take(np.flatnonzero(sel))
            if measure is not None:
                m = np.asarray(measure)
                nt = float(np.sum(m[hold == flag]))
                neg = part.kind == NEGATIVE
                n_neg = int(neg.sum())
                if n_neg:
                    part.weight[neg] = nt / n_neg
                part.total_measure_NT = nt
            out.append(part)
        return out[0], out[1]

    # ------------------------------------------------------------------ design

    def design(self, keys: Sequence[FeatureKey] | None = None, instrumented: bool | None = None):
        """Split panel columns into regressors and instruments.

        Regressors: baseline, ghost bid stock (exogenous) and ad stock /
        retarget conjunction (endogenous).  Excluded instruments: potential
        ad stock columns.  With ``instrumented=False`` (the default when no
        potential ad stock key is present) every regressor is exogenous.
        """
        from .estimators import DesignMatrices

        keys = list(self.keys if keys is None else keys)
        idx = {k: i for i, k in enumerate(self.keys)}
        inst = [k for k in keys if k.stock_class == POTENTIAL_AD_STOCK]
        if instrumented is None:
            instrumented = bool(inst)
        if instrumented:
            exog = [k for k in keys if k.stock_class in (BASELINE, GHOST_BID_STOCK)]
            endog = [k for k in keys if k.stock_class in (AD_STOCK, RETARGET)]
        else:
            exog = [k for k in keys if k.stock_class != POTENTIAL_AD_STOCK]
            endog, inst = [], []
        cols = lambda ks: self.X[:, [idx[k] for k in ks]] if ks else np.zeros((len(self), 0))  # noqa: E731
        return DesignMatrices.build(self.y, cols(exog), cols(endog), cols(inst), self.weight, self.user,
                                    exog_keys=exog, endog_keys=endog, instrument_keys=inst)

    # ------------------------------------------------------------------ io

    def metadata(self) -> dict[str, Any]:
        return {"total_measure_NT": self.total_measure_NT, "counts": self.counts,
                "keys": [k.to_dict() for k in self.keys], "feature_config_hash": feature_config_hash(self.keys),
                **{k: v for k, v in self.meta.items() if k != "user_measure"}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["user_id", "t", "y", "weight", "kind"] + [k.canonical() for k in self.keys])
        for r in range(len(self)):
            wr.writerow([self.user_ids[self.user[r]], repr(float(self.t[r])), int(self.y[r]),
                         repr(float(self.weight[r])), int(self.kind[r])] + [repr(float(v)) for v in self.X[r]])
        return buf.getvalue()

    def sidecar(self) -> str:
        meta = self.metadata()
        meta["user_ids"] = list(self.user_ids)
        if "user_measure" in self.meta:
            meta["user_measure"] = list(map(float, self.meta["user_measure"]))
        return json.dumps(meta, sort_keys=True) + "\n"

    @classmethod
    def from_csv(cls, text: str, sidecar: str) -> Panel:
        meta = json.loads(sidecar.splitlines()[0])
        keys = tuple(FeatureKey.from_dict(d) for d in meta["keys"])
        rdr = csv.reader(io.StringIO(text))
        header = next(rdr)
        if header[5:] != [k.canonical() for k in keys]:
            raise PanelError("panel CSV header does not match its metadata keys")
        uids = list(meta["user_ids"])
        pos = {u: i for i, u in enumerate(uids)}
        rows = list(rdr)
        arr = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float).reshape(len(rows), 4 + len(keys))
        extra = {k: v for k, v in meta.items()
                 if k not in ("total_measure_NT", "counts", "keys", "feature_config_hash", "user_ids")}
        return cls(keys, uids, np.array([pos[r[0]] for r in rows], dtype=np.int64), arr[:, 0], arr[:, 1],
                   arr[:, 2], arr[:, 3].astype(np.int8), arr[:, 4:], float(meta["total_measure_NT"]), extra)


def _as_store(timelines) -> EventStore:
    if isinstance(timelines, EventStore):
        return timelines
    if isinstance(timelines, Mapping) or isinstance(timelines, (list, tuple)):
        return EventStore.from_timelines(timelines)
    if isinstance(timelines, EventTimeline):
        return EventStore.from_timelines([timelines])
    return EventStore.from_timelines(list(timelines))


def build_panel(timelines, keys: Sequence[FeatureKey], config: PanelConfig = PanelConfig()) -> Panel:
    """Sample the weighted panel and evaluate ``keys`` at every sampled time.

    Negative times are drawn user-first (users with probability proportional
    to window length, then uniform time in the window), which is uniform over
    total user-time.  Rows are ordered by ``(user_id, t, kind)``.
    """
    store = _as_store(timelines)
    keys = tuple(keys)
    n_pos = len(store.conv_t)
    if n_pos == 0:
        raise PanelError("no positives: the event log has no conversions, so the model is unidentifiable")
    lengths = store.window_lengths
    NT = float(lengths.sum())
    if not NT > 0:
        raise PanelError("total observed user-time is zero")
    n_neg = int(math.ceil(config.ratio_C * n_pos - 1e-9))
    rng = np.random.default_rng(np.random.SeedSequence([int(config.rng_seed), 0x9A4E1]))
    neg_user = rng.choice(store.n_users, size=n_neg, p=lengths / NT)
    neg_t = store.t_start[neg_user] + rng.random(n_neg) * lengths[neg_user]

    parts_u = [store.conv_user, neg_user]
    parts_t = [store.conv_t, neg_t]
    parts_k = [np.full(n_pos, POSITIVE, np.int8), np.full(n_neg, NEGATIVE, np.int8)]
    parts_w = [np.ones(n_pos), np.full(n_neg, NT / n_neg)]
    if config.add_double_negatives:
        parts_u.append(store.conv_user)
        parts_t.append(store.conv_t)
        parts_k.append(np.full(n_pos, DOUBLE_NEGATIVE, np.int8))
        parts_w.append(-np.ones(n_pos))
    user = np.concatenate(parts_u).astype(np.int64)
    t = np.concatenate(parts_t)
    kind = np.concatenate(parts_k)
    w = np.concatenate(parts_w)
    # user_ids are sorted, so the user index orders like user_id
    order = np.lexsort((kind, t, user))
    user, t, kind, w = user[order], t[order], kind[order], w[order]
    X = stock_matrix(store, user, t, keys)
    y = (kind == POSITIVE).astype(float)
    meta = {"ratio_C": config.ratio_C, "rng_seed": config.rng_seed,
            "add_double_negatives": config.add_double_negatives, "user_measure": lengths.copy()}
    return Panel(keys, list(store.user_ids), user, t, y, w, kind, X, NT, meta)
