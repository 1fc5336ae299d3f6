"""Shared test utilities."""

from __future__ import annotations

import random

from exec_sim.book import LimitOrderBook, Side


def random_events(rng: random.Random, n: int, mid: int = 100, width: int = 5):
    events = []
    issued = 0
    for _ in range(n):
        r = rng.random()
        owner = "agent" if rng.random() < 0.25 else "background"
        side = rng.choice(("buy", "sell"))
        if r < 0.6:
            events.append(("limit", side, rng.randint(mid - width, mid + width), rng.randint(1, 50), owner))
            issued += 1
        elif r < 0.8:
            events.append(("market", side, rng.randint(1, 80), owner))
            issued += 1
        else:
            events.append(("cancel", rng.randint(1, issued + 2)))
    return events


def replay_engine(events, book: LimitOrderBook | None = None, check=None):
    """Run events through the engine; returns (book, trades, final_book)."""
    book = book or LimitOrderBook()
    for ev in events:
        if ev[0] == "limit":
            book.submit_limit(Side(ev[1]), ev[2], ev[3], ev[4])
        elif ev[0] == "market":
            book.submit_market(Side(ev[1]), ev[2], ev[3])
        else:
            book.cancel(ev[1])
        if check is not None:
            check(book)
    trades = [
        (t.price, t.qty, t.maker_id, t.taker_id, t.ts, t.aggressor_side.value, t.maker_owner, t.taker_owner)
        for t in book.trade_log
    ]
    final = sorted((o.side.value, o.price, o.ts, o.id, o.remaining, o.owner) for o in book.resting())
    return book, trades, final


def assert_book_invariants(book: LimitOrderBook) -> None:
    if book.bids and book.asks:
        assert book.best_bid < book.best_ask
    for ladder in (book.bids, book.asks):
        for price, queue in ladder.items():
            assert queue, "empty level left in ladder"
            ts = [o.ts for o in queue]
            assert ts == sorted(ts) and len(set(ts)) == len(ts)
            for o in queue:
                assert o.price == price and 0 < o.remaining <= o.qty
