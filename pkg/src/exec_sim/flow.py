"""Zero-intelligence background order flow.

Each step draws Poisson counts of limit, cancel and market arrivals and
applies them in that order. Limit orders are placed a geometric number of
ticks behind a same-side anchor; market orders sweep the opposite side.
Liquidity taken by anyone, the agent included, only comes back through new
limit arrivals, which is what gives the book its impact and resilience.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rngmod
from .book import BACKGROUND, Event, LimitOrderBook, Side
from .errors import ConfigError


@dataclass(frozen=True)
class FlowConfig:
    limit_rate: float = 3.0
    market_rate: float = 1.0
    cancel_rate: float = 2.0
    depth_geom_p: float = 0.4
    size_dist: tuple[tuple[int, float], ...] = ((50, 0.4), (100, 0.4), (200, 0.2))
    init_mid: int = 10_000
    init_depth_qty: int = 200
    seed_levels: int = 10

    def __post_init__(self) -> None:
        for name in ("limit_rate", "market_rate", "cancel_rate"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"flow.{name}", f"must be a finite rate >= 0, got {value}")
        if not 0 < self.depth_geom_p <= 1:
            raise ConfigError("flow.depth_geom_p", f"must lie in (0, 1], got {self.depth_geom_p}")
        if not self.size_dist:
            raise ConfigError("flow.size_dist", "must not be empty")
        if any(size <= 0 or int(size) != size for size, _ in self.size_dist):
            raise ConfigError("flow.size_dist", "sizes must be positive integers")
        if any(p <= 0 for _, p in self.size_dist):
            raise ConfigError("flow.size_dist", "probabilities must be positive")
        if abs(sum(p for _, p in self.size_dist) - 1.0) > 1e-9:
            raise ConfigError("flow.size_dist", "probabilities must sum to 1")
        if self.init_mid <= self.seed_levels:
            raise ConfigError("flow.init_mid", "must exceed seed_levels so seeded prices stay positive")
        if self.init_depth_qty <= 0:
            raise ConfigError("flow.init_depth_qty", "must be positive")
        if self.seed_levels < 0:
            raise ConfigError("flow.seed_levels", "must be >= 0")

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s for s, _ in self.size_dist], dtype=np.int64)

    @property
    def size_probs(self) -> np.ndarray:
        p = np.array([p for _, p in self.size_dist], dtype=float)
        return p / p.sum()


@dataclass
class SimState:
    book: LimitOrderBook
    seed: int
    config: FlowConfig
    step_index: int = 0
    _sizes: np.ndarray = field(init=False, repr=False)
    _probs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._sizes = self.config.sizes
        self._probs = self.config.size_probs

    @property
    def last_trade_price(self) -> Optional[int]:
        log = self.book.trade_log
        return log[-1].price if log else None


def init_sim(config: FlowConfig, seed: int) -> SimState:
    """Fresh state with ``seed_levels`` levels of ``init_depth_qty`` per side."""
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")
    book = LimitOrderBook()
    for i in range(1, config.seed_levels + 1):
        book.submit_limit(Side.BUY, config.init_mid - i, config.init_depth_qty, BACKGROUND)
        book.submit_limit(Side.SELL, config.init_mid + i, config.init_depth_qty, BACKGROUND)
    return SimState(book=book, seed=seed, config=config)


def _anchor(state: SimState, side: Side) -> int:
    """Price a depth-0 limit order on ``side`` would take.

    Joins the same-side best when the spread is one tick and improves it by
    one tick when the spread is wider. An empty side re-anchors to the last
    trade price (``init_mid`` before any trade), kept clear of the opposite
    touch.
    """
    book = state.book
    own, other = book.best(side), book.best(side.opposite)
    if own is not None:
        if other is not None and abs(other - own) > 1:
            return own + side.sign
        return own
    ref = state.last_trade_price if state.last_trade_price is not None else state.config.init_mid
    if other is None:
        return ref
    return min(ref, other - 1) if side is Side.BUY else max(ref, other + 1)


def step_background(state: SimState) -> list[Event]:
    """Advance the background flow by one step and return the events it produced."""
    cfg = state.config
    book = state.book
    gen = rngmod.stream(state.seed, state.step_index)
    n_limit = gen.poisson(cfg.limit_rate) if cfg.limit_rate > 0 else 0
    n_cancel = gen.poisson(cfg.cancel_rate) if cfg.cancel_rate > 0 else 0
    n_market = gen.poisson(cfg.market_rate) if cfg.market_rate > 0 else 0
    first = len(book.event_log)

    for _ in range(n_limit):
        side = Side.BUY if gen.random() < 0.5 else Side.SELL
        offset = int(gen.geometric(cfg.depth_geom_p)) - 1
        size = int(gen.choice(state._sizes, p=state._probs))
        price = max(1, _anchor(state, side) - side.sign * offset)
        book.submit_limit(side, price, size, BACKGROUND)

    for _ in range(n_cancel):
        u = gen.random()
        candidates = book.resting(BACKGROUND)
        if candidates:
            book.cancel(candidates[int(u * len(candidates))].id)

    for _ in range(n_market):
        side = Side.BUY if gen.random() < 0.5 else Side.SELL
        size = int(gen.choice(state._sizes, p=state._probs))
        book.submit_market(side, size, BACKGROUND)

    state.step_index += 1
    return book.event_log[first:]
