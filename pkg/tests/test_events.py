from __future__ import annotations

import gzip
import io
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incrbid.events import (
    EventLogError,
    EventStore,
    dumps_timelines,
    ingest,
    read_events,
)


def _lines(records):
    return [json.dumps(r) for r in records]


def _three_users():
    recs = []
    for u, off in (("a", 0.0), ("b", 100.0), ("c", 50.0)):
        recs.append({"type": "window", "user_id": u, "t_start": off, "t_end": off + 100.0})
        recs.append({"type": "bid", "user_id": u, "t_j": off + 30.0, "ghost_bid_g": 1.0, "submitted_B": True,
                     "won_A": True, "cost_c": 0.5, "viewable_V": True, "p_win_b": 0.6, "p_win_g": 0.6})
        recs.append({"type": "bid", "user_id": u, "t_j": off + 10.0, "ghost_bid_g": 2.0, "submitted_B": False,
                     "won_A": False, "p_win_g": 0.3})
        recs.append({"type": "conversion", "user_id": u, "t_c": off + 20.0, "value_v": 10.0, "margin_m": 0.2})
    return recs


def test_empty_stream():
    assert ingest([]) == {}


def test_won_without_submitted_rejected():
    recs = [{"type": "window", "user_id": "u", "t_start": 0, "t_end": 10},
            {"type": "bid", "user_id": "u", "t_j": 1.0, "submitted_B": False, "won_A": True, "cost_c": 1.0,
             "viewable_V": True}]
    with pytest.raises(EventLogError) as exc:
        ingest(_lines(recs))
    assert exc.value.rejections[0].reason == "won-without-submitted"
    assert exc.value.rejections[0].line == 2


def test_shuffled_users_sorted_against_oracle():
    recs = _three_users()
    random.Random(3).shuffle(recs)
    tl = ingest(_lines(recs))
    assert sorted(tl) == ["a", "b", "c"]
    for uid, t in tl.items():
        # oracle: filter, then sort by time
        bids = sorted((r["t_j"] for r in recs if r["type"] == "bid" and r["user_id"] == uid))
        assert [b.t_j for b in t.bids] == bids
        assert [c.t_c for c in t.conversions] == [r["t_c"] for r in recs
                                                  if r["type"] == "conversion" and r["user_id"] == uid]
        assert t.window_length == 100.0


@pytest.mark.parametrize("bad,reason", [
    ({"type": "click", "user_id": "u"}, "unknown-type"),
    ({"type": "bid", "user_id": "u", "t_j": 50.0, "submitted_B": True, "won_A": False}, "out-of-window"),
    ({"type": "bid", "user_id": "zz", "t_j": 1.0, "submitted_B": True, "won_A": False}, "missing-window"),
    ({"type": "bid", "user_id": "u", "t_j": 1.0, "submitted_B": True, "won_A": True, "viewable_V": True},
     "cost-without-win"),
    ({"type": "bid", "user_id": "u", "t_j": 1.0, "submitted_B": True, "won_A": False, "cost_c": 1.0},
     "cost-without-win"),
    ({"type": "bid", "user_id": "u", "t_j": 1.0, "submitted_B": True, "won_A": True, "cost_c": 1.0},
     "viewability-unknown-on-win"),
    ({"type": "bid", "user_id": "u", "t_j": 1.0, "submitted_B": True, "won_A": False, "p_win_b": 1.5},
     "probability-out-of-range"),
    ({"type": "conversion", "user_id": "u", "t_c": 1.0, "value_v": -1.0}, "negative-value"),
    ({"type": "window", "user_id": "v", "t_start": 5.0, "t_end": 5.0}, "empty-window"),
])
def test_rejections(bad, reason):
    recs = [{"type": "window", "user_id": "u", "t_start": 0, "t_end": 10}, bad]
    rep = read_events(_lines(recs) + ["{not json"])
    reasons = [r.reason for r in rep.rejections]
    assert reason in reasons and "malformed-json" in reasons


def test_unknown_fields_counted():
    recs = [{"type": "window", "user_id": "u", "t_start": 0, "t_end": 10, "extra": 1},
            {"type": "conversion", "user_id": "u", "t_c": 3.0, "foo": "bar", "baz": 2}]
    rep = read_events(_lines(recs))
    assert rep.unknown_fields == 3 and not rep.rejections


def test_round_trip_and_gzip(tmp_path):
    recs = _three_users()
    tl = ingest(_lines(recs))
    text = dumps_timelines(tl)
    assert ingest(io.StringIO(text)) == tl
    p = tmp_path / "log.ndjson.gz"
    with gzip.open(p, "wt") as fh:
        fh.write(text)
    assert ingest(str(p)) == tl


def test_store_round_trip():
    tl = ingest(_lines(_three_users()))
    store = EventStore.from_timelines(tl)
    assert store.to_timelines() == tl
    assert store.total_measure == 300.0
    assert list(store.bids.t[:2]) == [10.0, 30.0]


@given(st.randoms(use_true_random=False))
@settings(max_examples=30, deadline=None)
def test_permutation_invariance(rnd):
    recs = _lines(_three_users())
    shuffled = list(recs)
    rnd.shuffle(shuffled)
    assert ingest(shuffled) == ingest(recs)
