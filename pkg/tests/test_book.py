import csv
import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from exec_sim.book import (
    AGENT,
    BACKGROUND,
    LimitOrderBook,
    Side,
    export_events_jsonl,
    export_trades_csv,
)
from helpers import assert_book_invariants, random_events, replay_engine
from reference_matcher import run_reference


def test_limit_on_empty_book_rests():
    book = LimitOrderBook()
    _, trades = book.submit_limit(Side.BUY, 100, 100)
    assert trades == []
    assert book.depth(1).bids == ((100, 100),)


def test_limit_partial_cross_rests_remainder():
    events = [("limit", "sell", 101, 50, BACKGROUND), ("limit", "buy", 101, 80, BACKGROUND)]
    expected_trades, expected_book = run_reference(events)
    book, trades, final = replay_engine(events)
    assert trades == expected_trades
    assert [(t[0], t[1]) for t in trades] == [(101, 50)]
    assert book.depth(1).bids == ((101, 30),)
    assert book.asks == {}
    assert final == expected_book


def test_fifo_within_level():
    events = [
        ("limit", "sell", 101, 30, BACKGROUND),
        ("limit", "sell", 101, 20, BACKGROUND),
        ("limit", "buy", 101, 40, BACKGROUND),
    ]
    expected, _ = run_reference(events)
    book, trades, _ = replay_engine(events)
    assert trades == expected
    assert [(t[0], t[1]) for t in trades] == [(101, 30), (101, 10)]
    makers = [book.trade_log[0].maker_id, book.trade_log[1].maker_id]
    assert makers == [1, 2]


def test_market_walks_levels():
    events = [
        ("limit", "sell", 101, 50, BACKGROUND),
        ("limit", "sell", 102, 30, BACKGROUND),
        ("market", "buy", 60, BACKGROUND),
    ]
    expected, expected_book = run_reference(events)
    book, trades, final = replay_engine(events)
    assert trades == expected
    assert [(t[0], t[1]) for t in trades] == [(101, 50), (102, 10)]
    assert book.depth(5).asks == ((102, 20),)
    assert final == expected_book


def test_market_on_empty_side():
    book = LimitOrderBook()
    assert book.submit_market(Side.BUY, 10) == []


def test_market_exact_fill_clears_side():
    book = LimitOrderBook()
    book.submit_limit(Side.SELL, 101, 50)
    trades = book.submit_market(Side.BUY, 50)
    assert [(t.price, t.qty) for t in trades] == [(101, 50)]
    assert book.best_ask is None


def test_market_remainder_is_not_rested():
    book = LimitOrderBook()
    book.submit_limit(Side.SELL, 101, 10)
    book.submit_market(Side.BUY, 30)
    assert book.resting() == []


@pytest.mark.parametrize("price,qty", [(0, 10), (-1, 10), (100, 0), (100, -5)])
def test_limit_rejects_bad_args(price, qty):
    with pytest.raises(ValueError):
        LimitOrderBook().submit_limit(Side.BUY, price, qty)


def test_market_rejects_bad_qty():
    with pytest.raises(ValueError):
        LimitOrderBook().submit_market(Side.SELL, 0)


def test_cancel():
    book = LimitOrderBook()
    oid, _ = book.submit_limit(Side.BUY, 100, 100)
    assert book.cancel(oid) == 100
    assert book.resting() == [] and book.bids == {}
    assert book.cancel(oid) == 0
    assert book.cancel(12345) == 0


def test_cancel_after_partial_fill():
    events = [("limit", "buy", 100, 100, BACKGROUND), ("market", "sell", 40, BACKGROUND)]
    _, expected_book = run_reference(events)
    book, _, final = replay_engine(events)
    assert final == expected_book
    assert book.cancel(1) == 60


def test_depth_snapshot():
    book = LimitOrderBook()
    snap = book.depth(10)
    assert snap.bids == () and snap.asks == () and snap.mid_half_ticks is None and snap.spread is None
    book.submit_limit(Side.BUY, 100, 70)
    book.submit_limit(Side.SELL, 101, 50)
    snap = book.depth(10)
    assert snap.mid_half_ticks == 201 and snap.mid == 100.5 and snap.spread == 1
    book.submit_limit(Side.BUY, 99, 30)
    assert book.depth(1).bids == ((100, 70),)
    assert book.depth(5).bids == ((100, 70), (99, 30))
    with pytest.raises(ValueError):
        book.depth(0)


def test_depth_aggregates_queue():
    book = LimitOrderBook()
    book.submit_limit(Side.SELL, 105, 10)
    book.submit_limit(Side.SELL, 103, 20)
    book.submit_limit(Side.SELL, 103, 5)
    assert book.depth(3).asks == ((103, 25), (105, 10))


def test_agent_never_trades_with_itself():
    book = LimitOrderBook()
    own, _ = book.submit_limit(Side.SELL, 101, 30, owner=AGENT)
    book.submit_limit(Side.SELL, 101, 20, owner=BACKGROUND)
    trades = book.submit_market(Side.BUY, 25, owner=AGENT)
    assert [(t.qty, t.maker_owner) for t in trades] == [(20, BACKGROUND)]
    assert book.get(own) is None
    assert book.event_log[-1].kind == "self_cancel" and book.event_log[-1].order_id == own


def test_background_self_match_allowed():
    book = LimitOrderBook()
    book.submit_limit(Side.SELL, 101, 30)
    trades = book.submit_market(Side.BUY, 10)
    assert trades[0].maker_owner == trades[0].taker_owner == BACKGROUND


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 200))
def test_matches_reference(seed, n):
    events = random_events(random.Random(seed), n)
    expected_trades, expected_book = run_reference(events)
    _, trades, final = replay_engine(events, check=assert_book_invariants)
    assert trades == expected_trades
    assert final == expected_book


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_volume_conservation(seed):
    events = random_events(random.Random(seed), 200)
    book, _, _ = replay_engine(events)
    filled: dict[int, int] = {}
    for t in book.trade_log:
        filled[t.maker_id] = filled.get(t.maker_id, 0) + t.qty
        filled[t.taker_id] = filled.get(t.taker_id, 0) + t.qty
    submitted = {ev.order_id: ev.qty for ev in book.event_log if ev.kind in ("limit", "market")}
    removed = {ev.order_id: ev.qty for ev in book.event_log if ev.kind in ("cancel", "self_cancel")}
    resting = {o.id: o.remaining for o in book.resting()}
    for oid, qty in submitted.items():
        kind = next(ev.kind for ev in book.event_log if ev.order_id == oid)
        if kind == "limit":
            assert qty == filled.get(oid, 0) + removed.get(oid, 0) + resting.get(oid, 0)
        else:
            assert filled.get(oid, 0) <= qty
    assert sum(filled.values()) == 2 * sum(t.qty for t in book.trade_log)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fifo_fill_order(seed):
    events = random_events(random.Random(seed), 150)
    book, _, _ = replay_engine(events)
    ts_of = {ev.order_id: ev.ts for ev in book.event_log if ev.kind == "limit"}
    price_of = {ev.order_id: (ev.side, ev.price) for ev in book.event_log if ev.kind == "limit"}
    last_fill: dict[int, int] = {}
    for i, t in enumerate(book.trade_log):
        last_fill[t.maker_id] = i
    first_fill: dict[int, int] = {}
    for i, t in reversed(list(enumerate(book.trade_log))):
        first_fill[t.maker_id] = i
    makers = list(first_fill)
    for a in makers:
        for b in makers:
            if a != b and price_of[a] == price_of[b] and ts_of[a] < ts_of[b]:
                # a queued earlier at the same level: b never fills before a is done
                assert first_fill[b] > last_fill[a]


def test_determinism():
    events = random_events(random.Random(7), 200)
    _, t1, b1 = replay_engine(events)
    _, t2, b2 = replay_engine(events)
    assert t1 == t2 and b1 == b2


def test_exports(tmp_path):
    events = random_events(random.Random(3), 50)
    book, _, _ = replay_engine(events)
    export_events_jsonl(book.event_log, tmp_path / "events.jsonl")
    export_trades_csv(book.trade_log, tmp_path / "trades.csv")
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    assert len(lines) == len(book.event_log)
    rec = json.loads(lines[0])
    assert list(rec) == ["ts", "kind", "side", "price", "qty", "order_id", "owner"]
    rows = list(csv.reader(open(tmp_path / "trades.csv")))
    assert rows[0] == ["ts", "price", "qty", "aggressor_side", "maker_owner", "taker_owner"]
    assert len(rows) == len(book.trade_log) + 1
