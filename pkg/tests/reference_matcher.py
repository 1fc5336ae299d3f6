"""Brute-force O(n^2) matcher used as an oracle for the book engine.

Resting orders live in one flat list. Every incoming order rescans the whole
list for the best-priced, earliest opposite order it can trade with. No
sorted structures, no queues.
"""

from __future__ import annotations


def run_reference(events):
    """Replay ``events`` and return (trades, final_book).

    Events:
      ("limit", side, price, qty, owner)
      ("market", side, qty, owner)
      ("cancel", order_id)
    side is "buy" / "sell". Trades are tuples
    (price, qty, maker_id, taker_id, ts, aggressor_side, maker_owner, taker_owner).
    Final book entries are (side, price, ts, id, remaining, owner).
    """
    resting = []  # dicts
    trades = []
    next_id = 1
    ts = 0
    for ev in events:
        kind = ev[0]
        if kind == "cancel":
            target = [o for o in resting if o["id"] == ev[1]]
            if target:
                resting.remove(target[0])
                ts += 1
            continue
        ts += 1
        oid = next_id
        next_id += 1
        if kind == "limit":
            _, side, price, qty, owner = ev
        else:
            _, side, qty, owner = ev
            price = None
        left = qty
        while left > 0:
            best = None
            for o in resting:
                if o["side"] == side:
                    continue
                if price is not None:
                    if side == "buy" and o["price"] > price:
                        continue
                    if side == "sell" and o["price"] < price:
                        continue
                if best is None:
                    best = o
                    continue
                better_price = o["price"] < best["price"] if side == "buy" else o["price"] > best["price"]
                if better_price or (o["price"] == best["price"] and o["ts"] < best["ts"]):
                    best = o
            if best is None:
                break
            if owner == "agent" and best["owner"] == "agent":
                resting.remove(best)
                continue
            fill = min(left, best["rem"])
            best["rem"] -= fill
            left -= fill
            trades.append((best["price"], fill, best["id"], oid, ts, side, best["owner"], owner))
            if best["rem"] == 0:
                resting.remove(best)
        if kind == "limit" and left > 0:
            resting.append({"id": oid, "side": side, "price": price, "rem": left, "ts": ts, "owner": owner})
    book = sorted((o["side"], o["price"], o["ts"], o["id"], o["rem"], o["owner"]) for o in resting)
    return trades, book
