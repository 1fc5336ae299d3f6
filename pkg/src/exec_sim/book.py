"""Price-time priority limit order book.

Prices are integer ticks and quantities integer shares, so nothing in the
matching path touches floating point. The midprice is reported in half-ticks.
Each accepted event (limit, market, cancel) consumes one value of the logical
clock ``next_ts``; trades carry the ts of the taker event that produced them.
"""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Deque, Iterable, Iterator, Optional

from sortedcontainers import SortedDict

AGENT = "agent"
BACKGROUND = "background"


class Side(str, Enum):
    BUY = "buy"
    SELL = "sell"

    @property
    def opposite(self) -> "Side":
        return Side.SELL if self is Side.BUY else Side.BUY

    @property
    def sign(self) -> int:
        return 1 if self is Side.BUY else -1


@dataclass(slots=True)
class LimitOrder:
    id: int
    side: Side
    price: int
    qty: int
    remaining: int
    ts: int
    owner: str = BACKGROUND


@dataclass(frozen=True, slots=True)
class Trade:
    price: int
    qty: int
    maker_id: int
    taker_id: int
    ts: int
    aggressor_side: Side
    maker_owner: str = BACKGROUND
    taker_owner: str = BACKGROUND


@dataclass(frozen=True, slots=True)
class Event:
    """One accepted book event, as exported to JSON Lines."""

    ts: int
    kind: str  # limit | market | cancel | self_cancel
    side: Side
    price: Optional[int]
    qty: int
    order_id: int
    owner: str


@dataclass(frozen=True)
class DepthSnapshot:
    bids: tuple[tuple[int, int], ...]
    asks: tuple[tuple[int, int], ...]
    mid_half_ticks: Optional[int] = None
    spread: Optional[int] = None

    @property
    def mid(self) -> Optional[float]:
        return None if self.mid_half_ticks is None else self.mid_half_ticks / 2


class LimitOrderBook:
    """Two ladders of FIFO queues keyed by price.

    The agent never trades with itself: when an agent taker reaches one of
    the agent's own resting orders, that resting order is cancelled (logged as
    ``self_cancel``) and matching continues behind it.
    """

    def __init__(self) -> None:
        self.bids: SortedDict = SortedDict()
        self.asks: SortedDict = SortedDict()
        self.orders: dict[int, LimitOrder] = {}
        self.next_ts = 1
        self.next_id = 1
        self.trade_log: list[Trade] = []
        self.event_log: list[Event] = []

    # -- queries -------------------------------------------------------------
    def _ladder(self, side: Side) -> SortedDict:
        return self.bids if side is Side.BUY else self.asks

    @property
    def best_bid(self) -> Optional[int]:
        return self.bids.peekitem(-1)[0] if self.bids else None

    @property
    def best_ask(self) -> Optional[int]:
        return self.asks.peekitem(0)[0] if self.asks else None

    def best(self, side: Side) -> Optional[int]:
        return self.best_bid if side is Side.BUY else self.best_ask

    @property
    def mid_half_ticks(self) -> Optional[int]:
        if not self.bids or not self.asks:
            return None
        return self.best_bid + self.best_ask

    @property
    def spread(self) -> Optional[int]:
        if not self.bids or not self.asks:
            return None
        return self.best_ask - self.best_bid

    def get(self, order_id: int) -> Optional[LimitOrder]:
        """The resting order with this id, or None."""
        return self.orders.get(order_id)

    def resting(self, owner: Optional[str] = None) -> list[LimitOrder]:
        """Resting orders in acceptance order, optionally filtered by owner."""
        if owner is None:
            return list(self.orders.values())
        return [o for o in self.orders.values() if o.owner == owner]

    def levels(self, side: Side) -> Iterator[tuple[int, int]]:
        """(price, aggregate qty) pairs for one side, best first."""
        ladder = self._ladder(side)
        prices = reversed(ladder.keys()) if side is Side.BUY else iter(ladder.keys())
        for price in prices:
            yield price, sum(o.remaining for o in ladder[price])

    def depth(self, k: int) -> DepthSnapshot:
        if k < 1:
            raise ValueError("k must be >= 1")
        bids = []
        for level in self.levels(Side.BUY):
            if len(bids) == k:
                break
            bids.append(level)
        asks = []
        for level in self.levels(Side.SELL):
            if len(asks) == k:
                break
            asks.append(level)
        return DepthSnapshot(tuple(bids), tuple(asks), self.mid_half_ticks, self.spread)

    # -- mutation ------------------------------------------------------------
    def _tick(self) -> int:
        ts = self.next_ts
        self.next_ts += 1
        return ts

    def _accept(self) -> tuple[int, int]:
        oid = self.next_id
        self.next_id += 1
        return oid, self._tick()

    def _match(
        self, side: Side, limit: Optional[int], qty: int, taker_id: int, ts: int, owner: str
    ) -> tuple[list[Trade], int]:
        opposite = self._ladder(side.opposite)
        trades: list[Trade] = []
        while qty > 0 and opposite:
            price = opposite.peekitem(-1 if side is Side.SELL else 0)[0]
            if limit is not None and (price > limit if side is Side.BUY else price < limit):
                break
            queue: Deque[LimitOrder] = opposite[price]
            maker = queue[0]
            if owner == AGENT and maker.owner == AGENT:
                queue.popleft()
                del self.orders[maker.id]
                self.event_log.append(
                    Event(ts, "self_cancel", maker.side, maker.price, maker.remaining, maker.id, maker.owner)
                )
                maker.remaining = 0
            else:
                fill = min(qty, maker.remaining)
                maker.remaining -= fill
                qty -= fill
                trade = Trade(price, fill, maker.id, taker_id, ts, side, maker.owner, owner)
                trades.append(trade)
                self.trade_log.append(trade)
                if maker.remaining == 0:
                    queue.popleft()
                    del self.orders[maker.id]
            if not queue:
                del opposite[price]
        return trades, qty

    def submit_limit(
        self, side: Side, price: int, qty: int, owner: str = BACKGROUND
    ) -> tuple[int, list[Trade]]:
        """Match what crosses, rest the remainder. Returns (order id, trades)."""
        if price <= 0:
            raise ValueError(f"price must be positive, got {price}")
        if qty <= 0:
            raise ValueError(f"qty must be positive, got {qty}")
        oid, ts = self._accept()
        self.event_log.append(Event(ts, "limit", side, price, qty, oid, owner))
        trades, left = self._match(side, price, qty, oid, ts, owner)
        if left > 0:
            order = LimitOrder(oid, side, price, qty, left, ts, owner)
            self._ladder(side).setdefault(price, deque()).append(order)
            self.orders[oid] = order
        return oid, trades

    def submit_market(self, side: Side, qty: int, owner: str = BACKGROUND) -> list[Trade]:
        """Immediate-or-cancel sweep of the opposite side."""
        if qty <= 0:
            raise ValueError(f"qty must be positive, got {qty}")
        oid, ts = self._accept()
        self.event_log.append(Event(ts, "market", side, None, qty, oid, owner))
        trades, _ = self._match(side, None, qty, oid, ts, owner)
        return trades

    def cancel(self, order_id: int) -> int:
        """Remove a resting order. Returns the cancelled qty (0 if not resting)."""
        order = self.orders.pop(order_id, None)
        if order is None:
            return 0
        ladder = self._ladder(order.side)
        queue = ladder[order.price]
        queue.remove(order)
        if not queue:
            del ladder[order.price]
        cancelled, order.remaining = order.remaining, 0
        ts = self._tick()
        self.event_log.append(Event(ts, "cancel", order.side, order.price, cancelled, order.id, order.owner))
        return cancelled

    def walk(self, side: Side, qty: int) -> tuple[list[tuple[int, int]], int]:
        """Fills a hypothetical ``side`` market order would get, without mutating.

        Returns the (price, qty) fills and the unreachable remainder.
        """
        fills = []
        for price, level_qty in self.levels(side.opposite):
            if qty == 0:
                break
            take = min(qty, level_qty)
            fills.append((price, take))
            qty -= take
        return fills, qty


def export_events_jsonl(events: Iterable[Event], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            rec = asdict(ev)
            rec["side"] = ev.side.value
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


TRADE_COLUMNS = ("ts", "price", "qty", "aggressor_side", "maker_owner", "taker_owner")


def export_trades_csv(trades: Iterable[Trade], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRADE_COLUMNS)
        for t in trades:
            writer.writerow((t.ts, t.price, t.qty, t.aggressor_side.value, t.maker_owner, t.taker_owner))
