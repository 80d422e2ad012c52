"""Event log data model, NDJSON ingestion and per-user timelines.

Each line of the log is one JSON object with a ``type`` tag in
``{window, bid, conversion, retarget}``.  Records are grouped by ``user_id``
into :class:`EventTimeline` objects whose event lists are sorted by time.

:class:`EventStore` is the columnar (struct-of-arrays) form of a collection of
timelines; feature evaluation and the simulator work on it directly.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from typing import IO, Any

import numpy as np

log = logging.getLogger(__name__)

RECORD_TYPES = ("window", "bid", "conversion", "retarget")

_BID_FIELDS = (
    "user_id",
    "t_j",
    "ghost_bid_g",
    "submitted_B",
    "submitted_bid_b",
    "p_win_b",
    "p_win_g",
    "won_A",
    "cost_c",
    "viewable_V",
    "p_viewable",
    "characteristics",
)
_CONV_FIELDS = ("user_id", "t_c", "value_v", "margin_m")
_RET_FIELDS = ("user_id", "t_r", "event_kind")
_WIN_FIELDS = ("user_id", "t_start", "t_end")
_KNOWN = {
    "window": set(_WIN_FIELDS),
    "bid": set(_BID_FIELDS),
    "conversion": set(_CONV_FIELDS),
    "retarget": set(_RET_FIELDS),
}


@dataclass(frozen=True)
class BidEvent:
    user_id: str
    t_j: float
    ghost_bid_g: float = 0.0
    submitted_B: bool = False
    submitted_bid_b: float = 0.0
    p_win_b: float = 0.0
    p_win_g: float = 0.0
    won_A: bool = False
    cost_c: float | None = None
    viewable_V: bool | None = None
    p_viewable: float = 1.0
    characteristics: Mapping[str, float] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"type": "bid"}
        for name in _BID_FIELDS:
            val = getattr(self, name)
            rec[name] = dict(val) if name == "characteristics" else val
        return rec


@dataclass(frozen=True)
class ConversionEvent:
    user_id: str
    t_c: float
    value_v: float = 1.0
    margin_m: float = 1.0

    @property
    def profit(self) -> float:
        return self.margin_m * self.value_v

    def to_record(self) -> dict[str, Any]:
        return {"type": "conversion", "user_id": self.user_id, "t_c": self.t_c,
                "value_v": self.value_v, "margin_m": self.margin_m}


@dataclass(frozen=True)
class RetargetEvent:
    user_id: str
    t_r: float
    event_kind: str = "homepage"

    def to_record(self) -> dict[str, Any]:
        return {"type": "retarget", "user_id": self.user_id, "t_r": self.t_r,
                "event_kind": self.event_kind}


@dataclass(frozen=True)
class EventTimeline:
    """All events of one user inside the observation window ``[t_start, t_end]``."""

    user_id: str
    t_start: float
    t_end: float
    bids: tuple[BidEvent, ...] = ()
    conversions: tuple[ConversionEvent, ...] = ()
    retargets: tuple[RetargetEvent, ...] = ()

    @property
    def window_length(self) -> float:
        return self.t_end - self.t_start

    def impressions(self) -> list[BidEvent]:
        return [b for b in self.bids if b.won_A]

    def to_records(self) -> list[dict[str, Any]]:
        out: list[dict[str, Any]] = [
            {"type": "window", "user_id": self.user_id, "t_start": self.t_start, "t_end": self.t_end}
        ]
        out.extend(b.to_record() for b in self.bids)
        out.extend(c.to_record() for c in self.conversions)
        out.extend(r.to_record() for r in self.retargets)
        return out


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str
    detail: str = ""

    def __str__(self) -> str:
        return f"line {self.line}: {self.reason}" + (f" ({self.detail})" if self.detail else "")


class EventLogError(ValueError):
    """Raised when an event log contains invalid records."""

    def __init__(self, rejections: list[Rejection]):
        self.rejections = rejections
        head = "; ".join(str(r) for r in rejections[:5])
        more = f" (+{len(rejections) - 5} more)" if len(rejections) > 5 else ""
        super().__init__(f"{len(rejections)} invalid record(s): {head}{more}")


@dataclass
class IngestReport:
    timelines: dict[str, EventTimeline]
    rejections: list[Rejection]
    unknown_fields: int = 0
    n_records: int = 0


class _Invalid(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason)
        self.reason = reason
        self.detail = detail


def _num(rec: dict, name: str, default: float | None = None, *, nonneg: bool = False,
         prob: bool = False) -> float:
    if name not in rec or rec[name] is None:
        if default is None:
            raise _Invalid("missing-field", name)
        return default
    val = rec[name]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise _Invalid("bad-type", f"{name} must be a number")
    val = float(val)
    if not math.isfinite(val):
        raise _Invalid("non-finite", name)
    if nonneg and val < 0:
        raise _Invalid("negative-value", name)
    if prob and not 0.0 <= val <= 1.0:
        raise _Invalid("probability-out-of-range", name)
    return val


def _flag(rec: dict, name: str, default: bool | None = None) -> bool:
    if name not in rec or rec[name] is None:
        if default is None:
            raise _Invalid("missing-field", name)
        return default
    val = rec[name]
    if not isinstance(val, bool):
        raise _Invalid("bad-type", f"{name} must be a boolean")
    return val


def _user(rec: dict) -> str:
    uid = rec.get("user_id")
    if uid is None or isinstance(uid, (dict, list)):
        raise _Invalid("missing-field", "user_id")
    return str(uid)


def _parse_bid(rec: dict, contexts: bool = False) -> BidEvent:
    # a bid context precedes its auction, so outcomes default to "not yet"
    won = _flag(rec, "won_A", False if contexts else None)
    submitted = _flag(rec, "submitted_B", False if contexts else None)
    if won and not submitted:
        raise _Invalid("won-without-submitted")
    ghost = _num(rec, "ghost_bid_g", 0.0, nonneg=True)
    bid = _num(rec, "submitted_bid_b", ghost if submitted else 0.0, nonneg=True)
    cost = rec.get("cost_c")
    if won:
        if cost is None:
            raise _Invalid("cost-without-win", "won impression lacks cost_c")
        cost = _num(rec, "cost_c", nonneg=True)
    elif cost is not None:
        raise _Invalid("cost-without-win", "cost_c present on a lost bid")
    viewable = rec.get("viewable_V")
    if viewable is not None and not isinstance(viewable, bool):
        raise _Invalid("bad-type", "viewable_V must be boolean or null")
    if won and viewable is None:
        raise _Invalid("viewability-unknown-on-win")
    chars = rec.get("characteristics") or {}
    if not isinstance(chars, dict):
        raise _Invalid("bad-type", "characteristics must be an object")
    clean: dict[str, float] = {}
    for key, val in chars.items():
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
            raise _Invalid("bad-type", f"characteristic {key!r} must be a finite number")
        clean[str(key)] = float(val)
    return BidEvent(
        user_id=_user(rec),
        t_j=_num(rec, "t_j"),
        ghost_bid_g=ghost,
        submitted_B=submitted,
        submitted_bid_b=bid,
        p_win_b=_num(rec, "p_win_b", 0.0, prob=True),
        p_win_g=_num(rec, "p_win_g", 0.0, prob=True),
        won_A=won,
        cost_c=cost,
        viewable_V=viewable,
        p_viewable=_num(rec, "p_viewable", 1.0, prob=True),
        characteristics=clean,
    )


def _parse_conversion(rec: dict) -> ConversionEvent:
    margin = _num(rec, "margin_m", 1.0)
    if not 0.0 <= margin <= 1.0:
        raise _Invalid("probability-out-of-range", "margin_m")
    return ConversionEvent(_user(rec), _num(rec, "t_c"), _num(rec, "value_v", 1.0, nonneg=True), margin)


def _parse_retarget(rec: dict) -> RetargetEvent:
    kind = rec.get("event_kind", "homepage")
    if not isinstance(kind, str):
        raise _Invalid("bad-type", "event_kind must be a string")
    return RetargetEvent(_user(rec), _num(rec, "t_r"), kind)


def _event_time(ev) -> float:
    if isinstance(ev, BidEvent):
        return ev.t_j
    if isinstance(ev, ConversionEvent):
        return ev.t_c
    return ev.t_r


def _sort_key(ev) -> tuple[float, str]:
    # ties broken by content so the order does not depend on input order
    return (_event_time(ev), json.dumps(ev.to_record(), sort_keys=True))


def iter_lines(source: str | os.PathLike | IO | Iterable[str]) -> Iterator[str]:
    """Yield text lines from a path (gzip detected by magic bytes), raw text, file object or iterable."""
    is_path = isinstance(source, os.PathLike) or (
        isinstance(source, str) and "\n" not in source and source != "" and os.path.exists(source))
    if is_path:
        with open(source, "rb") as fh:
            magic = fh.read(2)
        opener = gzip.open if magic == b"\x1f\x8b" else open
        with opener(source, "rt", encoding="utf-8") as fh:
            yield from fh
        return
    if isinstance(source, str):
        yield from io.StringIO(source)
        return
    yield from source


def read_events(source, *, contexts: bool = False) -> IngestReport:
    """Parse and validate an event stream without raising on bad records.

    With ``contexts=True`` bid records may omit ``won_A`` and ``submitted_B``
    (bid opportunities whose auction has not happened yet).
    """
    windows: dict[str, tuple[float, float, int]] = {}
    pending: list[tuple[int, Any]] = []
    rejections: list[Rejection] = []
    unknown = 0
    n = 0
    for lineno, raw in enumerate(iter_lines(source), start=1):
        line = raw.strip()
        if not line:
            continue
        n += 1
        try:
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _Invalid("malformed-json", str(exc)) from None
            if not isinstance(rec, dict):
                raise _Invalid("malformed-json", "record is not an object")
            kind = rec.get("type")
            if kind not in RECORD_TYPES:
                raise _Invalid("unknown-type", repr(kind))
            extra = set(rec) - _KNOWN[kind] - {"type"}
            unknown += len(extra)
            if kind == "window":
                uid = _user(rec)
                t0, t1 = _num(rec, "t_start"), _num(rec, "t_end")
                if not t1 > t0:
                    raise _Invalid("empty-window", f"t_end={t1} <= t_start={t0}")
                if uid in windows:
                    raise _Invalid("duplicate-window", uid)
                windows[uid] = (t0, t1, lineno)
            elif kind == "bid":
                pending.append((lineno, _parse_bid(rec, contexts)))
            elif kind == "conversion":
                pending.append((lineno, _parse_conversion(rec)))
            else:
                pending.append((lineno, _parse_retarget(rec)))
        except _Invalid as exc:
            rejections.append(Rejection(lineno, exc.reason, exc.detail))

    grouped: dict[str, dict[str, list]] = {
        uid: {"bids": [], "conversions": [], "retargets": []} for uid in windows
    }
    for lineno, ev in pending:
        win = windows.get(ev.user_id)
        if win is None:
            rejections.append(Rejection(lineno, "missing-window", ev.user_id))
            continue
        t = _event_time(ev)
        if not win[0] <= t <= win[1]:
            rejections.append(Rejection(lineno, "out-of-window", f"t={t} not in [{win[0]}, {win[1]}]"))
            continue
        slot = "bids" if isinstance(ev, BidEvent) else (
            "conversions" if isinstance(ev, ConversionEvent) else "retargets")
        grouped[ev.user_id][slot].append(ev)

    timelines = {}
    for uid in sorted(windows):
        t0, t1, _ = windows[uid]
        g = grouped[uid]
        timelines[uid] = EventTimeline(
            uid, t0, t1,
            tuple(sorted(g["bids"], key=_sort_key)),
            tuple(sorted(g["conversions"], key=_sort_key)),
            tuple(sorted(g["retargets"], key=_sort_key)),
        )
    if unknown:
        log.warning("ignored %d unknown field(s) in event log", unknown)
    rejections.sort(key=lambda r: r.line)
    return IngestReport(timelines, rejections, unknown, n)


def ingest(source) -> dict[str, EventTimeline]:
    """Read an NDJSON event log into validated timelines keyed by user id.

    Raises
    ------
    EventLogError
        If any record is invalid; the error lists line numbers and reasons.
    """
    report = read_events(source)
    if report.rejections:
        raise EventLogError(report.rejections)
    return report.timelines


def dump_timelines(timelines: Mapping[str, EventTimeline] | Iterable[EventTimeline], fh: IO[str]) -> int:
    """Write timelines as NDJSON records; returns the number of lines written."""
    items = timelines.values() if isinstance(timelines, Mapping) else timelines
    n = 0
    for tl in sorted(items, key=lambda x: x.user_id):
        for rec in tl.to_records():
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False))
            fh.write("\n")
            n += 1
    return n


def dumps_timelines(timelines) -> str:
    buf = io.StringIO()
    dump_timelines(timelines, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# columnar form


@dataclass
class BidTable:
    """Bid events of many users as parallel arrays sorted by ``(user, t)``."""

    user: np.ndarray
    t: np.ndarray
    ghost_bid: np.ndarray
    submitted: np.ndarray
    bid: np.ndarray
    p_win_b: np.ndarray
    p_win_g: np.ndarray
    won: np.ndarray
    cost: np.ndarray  # nan where not won
    viewable: np.ndarray  # 1.0 / 0.0, nan when unknown
    p_viewable: np.ndarray
    chars: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.t)

    def weight(self, characteristic: str) -> np.ndarray:
        if characteristic == "unit":
            return np.ones(len(self.t))
        return self.chars.get(characteristic, np.zeros(len(self.t)))

    def take(self, idx: np.ndarray) -> BidTable:
        return BidTable(
            self.user[idx], self.t[idx], self.ghost_bid[idx], self.submitted[idx], self.bid[idx],
            self.p_win_b[idx], self.p_win_g[idx], self.won[idx], self.cost[idx], self.viewable[idx],
            self.p_viewable[idx], {k: v[idx] for k, v in self.chars.items()},
        )

    @classmethod
    def empty(cls) -> BidTable:
        f = np.zeros(0)
        return cls(np.zeros(0, dtype=np.int64), f, f, np.zeros(0, bool), f, f, f,
                   np.zeros(0, bool), f, f, f, {})


@dataclass
class EventStore:
    """Columnar collection of timelines; user ``i`` is ``user_ids[i]``."""

    user_ids: list[str]
    t_start: np.ndarray
    t_end: np.ndarray
    bids: BidTable
    conv_user: np.ndarray
    conv_t: np.ndarray
    conv_value: np.ndarray
    conv_margin: np.ndarray
    ret_user: np.ndarray
    ret_t: np.ndarray
    ret_kind: np.ndarray  # object array of str

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def window_lengths(self) -> np.ndarray:
        return self.t_end - self.t_start

    @property
    def total_measure(self) -> float:
        return float(np.sum(self.t_end - self.t_start))

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    @classmethod
    def from_timelines(cls, timelines: Mapping[str, EventTimeline] | Iterable[EventTimeline]) -> EventStore:
        items = list(timelines.values()) if isinstance(timelines, Mapping) else list(timelines)
        items.sort(key=lambda x: x.user_id)
        uids = [tl.user_id for tl in items]
        bids = [(i, b) for i, tl in enumerate(items) for b in tl.bids]
        names = sorted({k for _, b in bids for k in b.characteristics})
        nb = len(bids)
        chars = {k: np.array([b.characteristics.get(k, 0.0) for _, b in bids], dtype=float) for k in names}
        table = BidTable(
            user=np.array([i for i, _ in bids], dtype=np.int64),
            t=np.array([b.t_j for _, b in bids], dtype=float),
            ghost_bid=np.array([b.ghost_bid_g for _, b in bids], dtype=float),
            submitted=np.array([b.submitted_B for _, b in bids], dtype=bool),
            bid=np.array([b.submitted_bid_b for _, b in bids], dtype=float),
            p_win_b=np.array([b.p_win_b for _, b in bids], dtype=float),
            p_win_g=np.array([b.p_win_g for _, b in bids], dtype=float),
            won=np.array([b.won_A for _, b in bids], dtype=bool),
            cost=np.array([np.nan if b.cost_c is None else b.cost_c for _, b in bids], dtype=float),
            viewable=np.array([np.nan if b.viewable_V is None else float(b.viewable_V) for _, b in bids],
                              dtype=float),
            p_viewable=np.array([b.p_viewable for _, b in bids], dtype=float),
            chars=chars,
        ) if nb else BidTable.empty()
        if nb:
            table = table.take(np.lexsort((table.t, table.user)))
        convs = sorted(((i, c) for i, tl in enumerate(items) for c in tl.conversions),
                       key=lambda x: (x[0], x[1].t_c))
        rets = sorted(((i, r) for i, tl in enumerate(items) for r in tl.retargets),
                      key=lambda x: (x[0], x[1].t_r))
        return cls(
            uids,
            np.array([tl.t_start for tl in items], dtype=float),
            np.array([tl.t_end for tl in items], dtype=float),
            table,
            np.array([i for i, _ in convs], dtype=np.int64),
            np.array([c.t_c for _, c in convs], dtype=float),
            np.array([c.value_v for _, c in convs], dtype=float),
            np.array([c.margin_m for _, c in convs], dtype=float),
            np.array([i for i, _ in rets], dtype=np.int64),
            np.array([r.t_r for _, r in rets], dtype=float),
            np.array([r.event_kind for _, r in rets], dtype=object),
        )

    def to_timelines(self) -> dict[str, EventTimeline]:
        b = self.bids
        per_bids: list[list[BidEvent]] = [[] for _ in self.user_ids]
        names = sorted(b.chars)
        for j in range(len(b)):
            u = int(b.user[j])
            chars = {k: float(b.chars[k][j]) for k in names if b.chars[k][j] != 0.0}
            per_bids[u].append(BidEvent(
                user_id=self.user_ids[u],
                t_j=float(b.t[j]),
                ghost_bid_g=float(b.ghost_bid[j]),
                submitted_B=bool(b.submitted[j]),
                submitted_bid_b=float(b.bid[j]),
                p_win_b=float(b.p_win_b[j]),
                p_win_g=float(b.p_win_g[j]),
                won_A=bool(b.won[j]),
                cost_c=None if math.isnan(b.cost[j]) else float(b.cost[j]),
                viewable_V=None if math.isnan(b.viewable[j]) else bool(b.viewable[j]),
                p_viewable=float(b.p_viewable[j]),
                characteristics=chars,
            ))
        per_conv: list[list[ConversionEvent]] = [[] for _ in self.user_ids]
        for j in range(len(self.conv_t)):
            u = int(self.conv_user[j])
            per_conv[u].append(ConversionEvent(self.user_ids[u], float(self.conv_t[j]),
                                               float(self.conv_value[j]), float(self.conv_margin[j])))
        per_ret: list[list[RetargetEvent]] = [[] for _ in self.user_ids]
        for j in range(len(self.ret_t)):
            u = int(self.ret_user[j])
            per_ret[u].append(RetargetEvent(self.user_ids[u], float(self.ret_t[j]), str(self.ret_kind[j])))
        out = {}
        for i, uid in enumerate(self.user_ids):
            out[uid] = EventTimeline(
                uid, float(self.t_start[i]), float(self.t_end[i]),
                tuple(sorted(per_bids[i], key=_sort_key)),
                tuple(sorted(per_conv[i], key=_sort_key)),
                tuple(sorted(per_ret[i], key=_sort_key)),
            )
        return out

    def subset(self, users: np.ndarray) -> EventStore:
        """Restrict to the given user indices (kept in the given order, re-indexed)."""
        users = np.asarray(users, dtype=np.int64)
        remap = np.full(self.n_users, -1, dtype=np.int64)
        remap[users] = np.arange(len(users))

        def _sel(user_arr):
            keep = remap[user_arr] >= 0
            return keep, remap[user_arr[keep]]

        kb, nb = _sel(self.bids.user)
        table = self.bids.take(np.flatnonzero(kb))
        table.user = nb
        order = np.lexsort((table.t, table.user))
        table = table.take(order)
        kc, nc = _sel(self.conv_user)
        co = np.lexsort((self.conv_t[kc], nc))
        kr, nr = _sel(self.ret_user)
        ro = np.lexsort((self.ret_t[kr], nr))
        return EventStore(
            [self.user_ids[i] for i in users], self.t_start[users], self.t_end[users], table,
            nc[co], self.conv_t[kc][co], self.conv_value[kc][co], self.conv_margin[kc][co],
            nr[ro], self.ret_t[kr][ro], self.ret_kind[kr][ro],
        )
