"""Parent-order execution environment.

One agent decision per simulation step. An action is a bundle of child-order
instructions applied in a fixed order: cancels, then a passive limit order,
then an aggressive market order, then one step of background flow.

The per-step reward is the signed improvement of each agent fill over the
running market VWAP at the moment of the fill, per share of the parent
order. If the horizon is reached with quantity left, the remainder is priced
by walking the book (anything beyond visible depth at the worst trade price
of the episode) and charged against the final market VWAP.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .book import AGENT, LimitOrderBook, Side
from .errors import ConfigError, InvalidStateError
from .flow import FlowConfig, SimState, init_sim, step_background


class SizeBucket(str, Enum):
    SMALL = "small"
    LARGE = "large"


@dataclass(frozen=True)
class PassiveIntent:
    level_offset: int
    size: SizeBucket


@dataclass(frozen=True)
class ActionSpec:
    passive: Optional[PassiveIntent] = None
    aggressive: Optional[SizeBucket] = None
    cancel_all_passive: bool = False

    @property
    def is_noop(self) -> bool:
        return self.passive is None and self.aggressive is None and not self.cancel_all_passive

    @property
    def kind(self) -> str:
        if self.is_noop:
            return "noop"
        if self.cancel_all_passive:
            return "cancel"
        if self.passive and self.aggressive:
            return "combo"
        return "passive" if self.passive else "aggressive"


NOOP = ActionSpec()


@dataclass(frozen=True)
class ParentOrder:
    side: Side = Side.BUY
    total_qty: int = 2000
    horizon: int = 100
    pov_target: float = 0.1

    def __post_init__(self) -> None:
        if self.total_qty <= 0:
            raise ConfigError("parent.total_qty", f"must be positive, got {self.total_qty}")
        if self.horizon <= 0:
            raise ConfigError("parent.horizon", f"must be positive, got {self.horizon}")
        if not 0 <= self.pov_target <= 1:
            raise ConfigError("parent.pov_target", f"must lie in [0, 1], got {self.pov_target}")


@dataclass(frozen=True)
class EnvConfig:
    k_levels: int = 10
    small_size: int = 50
    large_size: int = 100
    pov_band: float = 0.02
    trailing_window: int = 5

    def __post_init__(self) -> None:
        if self.k_levels < 1:
            raise ConfigError("env.k_levels", "must be >= 1")
        if self.small_size <= 0:
            raise ConfigError("env.small_size", "must be positive")
        if self.large_size < self.small_size:
            raise ConfigError("env.large_size", "must be >= env.small_size")
        if not 0 <= self.pov_band < 1:
            raise ConfigError("env.pov_band", "must lie in [0, 1)")
        if self.trailing_window < 1:
            raise ConfigError("env.trailing_window", "must be >= 1")

    def size_of(self, bucket: SizeBucket) -> int:
        return self.small_size if bucket is SizeBucket.SMALL else self.large_size


PASSIVE_OFFSETS = (0, 1, 2)
SIZES = (SizeBucket.SMALL, SizeBucket.LARGE)


def enumerate_actions(config: EnvConfig | None = None) -> list[ActionSpec]:
    """The fixed action list: no-op, cancel, 6 passive, 2 aggressive, 12 combos."""
    passive = [PassiveIntent(o, s) for o in PASSIVE_OFFSETS for s in SIZES]
    actions = [NOOP, ActionSpec(cancel_all_passive=True)]
    actions += [ActionSpec(passive=p) for p in passive]
    actions += [ActionSpec(aggressive=s) for s in SIZES]
    actions += [ActionSpec(passive=p, aggressive=s) for p in passive for s in SIZES]
    return actions


ACTIONS = enumerate_actions()
ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}


@dataclass(frozen=True)
class ParentState:
    remaining_fraction: float
    time_fraction: float
    schedule_deviation: float


@dataclass(frozen=True, eq=False)
class Observation:
    book_feats: np.ndarray  # 4K: bid (offset, qty) pairs then ask pairs
    parent_feats: np.ndarray  # remaining, time, schedule deviation, spread

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.book_feats, self.parent_feats])

    @property
    def remaining_fraction(self) -> float:
        return float(self.parent_feats[0])

    @property
    def time_fraction(self) -> float:
        return float(self.parent_feats[1])

    @property
    def schedule_deviation(self) -> float:
        return float(self.parent_feats[2])

    @property
    def spread_ticks(self) -> float:
        return float(self.parent_feats[3])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return np.array_equal(self.book_feats, other.book_feats) and np.array_equal(
            self.parent_feats, other.parent_feats
        )


def featurize(
    book: LimitOrderBook,
    parent_state: ParentState,
    k: int = 10,
    qty_scale: float = 1.0,
    fallback_price: Optional[float] = None,
) -> Observation:
    """Fixed-size book summary plus parent-order progress.

    Price offsets are in ticks from the mid (last trade price, then
    ``fallback_price`` when the mid is absent). Quantities are divided by
    ``qty_scale``. Missing levels are zero-filled.
    """
    feats = np.zeros(4 * k)
    mid = book.mid_half_ticks
    if mid is not None:
        ref = mid / 2
    elif book.trade_log:
        ref = float(book.trade_log[-1].price)
    else:
        ref = fallback_price
    snap = book.depth(k)
    for block, levels in ((0, snap.bids), (2 * k, snap.asks)):
        for i, (price, qty) in enumerate(levels):
            feats[block + 2 * i] = price - ref if ref is not None else 0.0
            feats[block + 2 * i + 1] = qty / qty_scale
    parent = np.array(
        [
            parent_state.remaining_fraction,
            parent_state.time_fraction,
            parent_state.schedule_deviation,
            float(snap.spread or 0),
        ]
    )
    return Observation(feats, parent)


@dataclass
class StepInfo:
    filled_this_step: int
    exec_vwap_so_far: Optional[float]
    market_vwap_so_far: Optional[float]
    participation_so_far: float
    fills: list[tuple[int, int]] = field(default_factory=list)
    terminal_penalty: float = 0.0
    telescoped_total: float = 0.0


@dataclass
class StepResult:
    obs: Observation
    reward: float
    done: bool
    info: StepInfo


TRACE_COLUMNS = (
    "step",
    "action_index",
    "filled",
    "reward",
    "mid",
    "spread",
    "participation",
    "best_bid",
    "best_ask",
    "passive_price",
    "fills",
)


@dataclass
class TraceRow:
    step: int
    action_index: int
    filled: int
    reward: float
    mid: Optional[float]
    spread: Optional[int]
    participation: float
    best_bid: Optional[int]
    best_ask: Optional[int]
    passive_price: Optional[int]
    fills: list[tuple[int, int]]
    market_volume: int = 0
    option: Optional[int] = None

    def as_csv(self) -> list[str]:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return repr(v)
            return str(v)

        fills = ";".join(f"{p}:{q}" for p, q in self.fills)
        return [
            fmt(self.step),
            fmt(self.action_index),
            fmt(self.filled),
            fmt(self.reward),
            fmt(self.mid),
            fmt(self.spread),
            fmt(self.participation),
            fmt(self.best_bid),
            fmt(self.best_ask),
            fmt(self.passive_price),
            fills,
        ]


def write_trace_csv(rows: Iterable[TraceRow], path: str | Path, extra: Sequence[str] = ()) -> None:
    """One row per step. ``extra`` names additional attributes (e.g. option)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS + tuple(extra))
        for row in rows:
            writer.writerow(row.as_csv() + [str(getattr(row, name)) for name in extra])


class ExecEnv:
    """Single-parent-order execution episode over a simulated book."""

    def __init__(
        self,
        flow: FlowConfig,
        parent: ParentOrder,
        config: EnvConfig | None = None,
    ) -> None:
        self.flow = flow
        self.parent = parent
        self.config = config or EnvConfig()
        self.actions = enumerate_actions(self.config)
        self.sim: Optional[SimState] = None
        self.done = True

    # -- lifecycle -----------------------------------------------------------
    def reset(self, seed: int) -> Observation:
        self.sim = init_sim(self.flow, seed)
        self.seed = seed
        self.step_index = 0
        self.filled = 0
        self.notional = 0
        self.market_volume = 0
        self.market_notional = 0
        self.worst_price: Optional[int] = None
        self.passive_id: Optional[int] = None
        self.passive_key: Optional[tuple[int, int]] = None
        self.volume_history: list[int] = []
        self.trade_cursor = len(self.sim.book.trade_log)
        self.total_reward = 0.0
        self.terminal_penalty = 0.0
        self.terminal_notional = 0.0
        self.trace: list[TraceRow] = []
        self.done = False
        mid = self.sim.book.mid_half_ticks
        self.arrival_price = mid / 2 if mid is not None else float(self.flow.init_mid)
        return self.observe()

    @property
    def book(self) -> LimitOrderBook:
        return self.sim.book

    @property
    def remaining(self) -> int:
        return self.parent.total_qty - self.filled

    @property
    def participation(self) -> float:
        return self.filled / self.market_volume if self.market_volume else 0.0

    @property
    def market_vwap(self) -> Optional[float]:
        return self.market_notional / self.market_volume if self.market_volume else None

    @property
    def exec_vwap(self) -> Optional[float]:
        return self.notional / self.filled if self.filled else None

    @property
    def all_in_exec_price(self) -> Optional[float]:
        """Average price including the terminal liquidation of any remainder."""
        if not self.done:
            return self.exec_vwap
        return (self.notional + self.terminal_notional) / self.parent.total_qty

    def trailing_market_volume(self) -> float:
        """Mean per-step volume traded by others over the trailing window."""
        window = self.volume_history[-self.config.trailing_window :]
        return float(np.mean(window)) if window else 0.0

    def parent_state(self) -> ParentState:
        dev = self.participation - self.parent.pov_target if self.market_volume else 0.0
        return ParentState(
            self.remaining / self.parent.total_qty,
            self.step_index / self.parent.horizon,
            dev,
        )

    def observe(self) -> Observation:
        return featurize(
            self.book,
            self.parent_state(),
            self.config.k_levels,
            self.flow.init_depth_qty,
            self.arrival_price,
        )

    # -- stepping ------------------------------------------------------------
    def _resolve(self, action: Union[int, ActionSpec]) -> tuple[int, ActionSpec]:
        if isinstance(action, ActionSpec):
            if action not in ACTION_INDEX:
                raise ValueError(f"action {action} is not in the enumerated set")
            return ACTION_INDEX[action], action
        if isinstance(action, (int, np.integer)) and 0 <= action < len(self.actions):
            return int(action), self.actions[action]
        raise ValueError(f"unknown action {action!r}")

    def _cancel_passive(self) -> None:
        if self.passive_id is not None:
            self.book.cancel(self.passive_id)
        self.passive_id = None
        self.passive_key = None

    def _passive_resting(self) -> int:
        if self.passive_id is None:
            return 0
        order = self.book.get(self.passive_id)
        if order is None:
            self.passive_id = None
            self.passive_key = None
            return 0
        return order.remaining

    def _passive_price(self, offset: int) -> int:
        side = self.parent.side
        own = self.book.best(side)
        if own is None:
            other = self.book.best(side.opposite)
            if other is not None:
                own = other - side.sign
            else:
                last = self.sim.last_trade_price
                own = last if last is not None else self.flow.init_mid
        return max(1, own - side.sign * offset)

    def _place_passive(self, intent: PassiveIntent) -> None:
        price = self._passive_price(intent.level_offset)
        size = self.config.size_of(intent.size)
        if self._passive_resting() and self.passive_key == (price, size):
            return
        self._cancel_passive()
        qty = min(size, self.remaining)
        if qty <= 0:
            return
        oid, _ = self.book.submit_limit(self.parent.side, price, qty, AGENT)
        if self.book.get(oid) is not None:
            self.passive_id = oid
            self.passive_key = (price, size)

    def _consume_trades(self) -> tuple[float, list[tuple[int, int]]]:
        """Fold new trades into the running totals; returns (reward, agent fills)."""
        sign = self.parent.side.sign
        reward = 0.0
        fills = []
        log = self.book.trade_log
        other_volume = 0
        for t in log[self.trade_cursor :]:
            self.market_volume += t.qty
            self.market_notional += t.price * t.qty
            if self.worst_price is None or sign * (t.price - self.worst_price) > 0:
                self.worst_price = t.price
            if t.maker_owner == AGENT or t.taker_owner == AGENT:
                self.filled += t.qty
                self.notional += t.price * t.qty
                fills.append((t.price, t.qty))
                vwap = self.market_notional / self.market_volume
                reward += sign * (vwap - t.price) * t.qty / self.parent.total_qty
            else:
                other_volume += t.qty
        self.trade_cursor = len(log)
        self._step_other_volume += other_volume
        return reward, fills

    def _terminal(self) -> float:
        """Charge for the unexecuted remainder at the horizon."""
        side = self.parent.side
        sign = side.sign
        walked, unreachable = self.book.walk(side, self.remaining)
        worst = self.worst_price
        if worst is None:
            worst = walked[-1][0] if walked else self.arrival_price
        bench = self.market_vwap if self.market_vwap is not None else self.arrival_price
        notional = sum(p * q for p, q in walked) + worst * unreachable
        self.terminal_notional = notional
        return sign * (bench * self.remaining - notional) / self.parent.total_qty

    def step(self, action: Union[int, ActionSpec]) -> StepResult:
        if self.sim is None or self.done:
            raise InvalidStateError("episode is finished; call reset()")
        index, spec = self._resolve(action)
        book = self.book
        decision = (book.best_bid, book.best_ask, book.mid_half_ticks, book.spread)
        self._step_other_volume = 0

        if spec.cancel_all_passive:
            self._cancel_passive()
        if spec.passive is not None:
            self._place_passive(spec.passive)
        reward, fills = self._consume_trades()
        if spec.aggressive is not None:
            qty = min(self.config.size_of(spec.aggressive), self.remaining)
            if qty > 0:
                book.submit_market(self.parent.side, qty, AGENT)
            r, f = self._consume_trades()
            reward += r
            fills += f
            if self._passive_resting() > self.remaining:
                self._cancel_passive()
        passive_price = book.get(self.passive_id).price if self._passive_resting() else None

        step_background(self.sim)
        r, f = self._consume_trades()
        reward += r
        fills += f
        self.volume_history.append(self._step_other_volume)
        self.step_index += 1

        terminal = 0.0
        if self.remaining == 0 or self.step_index >= self.parent.horizon:
            self.done = True
            self._passive_resting()
            if self.remaining > 0:
                terminal = self._terminal()
                self.terminal_penalty = terminal
            self._cancel_passive()
        reward += terminal
        self.total_reward += reward

        bench = self.market_vwap if self.market_vwap is not None else self.arrival_price
        telescoped = self.parent.side.sign * (bench * self.filled - self.notional) / self.parent.total_qty
        info = StepInfo(
            filled_this_step=sum(q for _, q in fills),
            exec_vwap_so_far=self.exec_vwap,
            market_vwap_so_far=self.market_vwap,
            participation_so_far=self.participation,
            fills=fills,
            terminal_penalty=terminal,
            telescoped_total=telescoped + self.terminal_penalty,
        )
        self.trace.append(
            TraceRow(
                step=self.step_index - 1,
                action_index=index,
                filled=info.filled_this_step,
                reward=reward,
                mid=None if decision[2] is None else decision[2] / 2,
                spread=decision[3],
                participation=self.participation,
                best_bid=decision[0],
                best_ask=decision[1],
                passive_price=passive_price,
                fills=fills,
                market_volume=self.market_volume,
            )
        )
        return StepResult(self.observe(), reward, self.done, info)


def pov_baseline(
    obs: Observation,
    parent: ParentOrder,
    trailing_market_volume: float,
    config: EnvConfig | None = None,
) -> ActionSpec:
    """Percentage-of-volume rule mapped onto the enumerated actions.

    Rests a passive order at the touch sized to the volume expected at the
    target rate, adds an aggressive order when participation falls below the
    band, and does nothing while ahead of target.
    """
    cfg = config or EnvConfig()
    target = parent.pov_target
    participation = obs.schedule_deviation + target
    if participation > target:
        return NOOP
    if target >= 1:
        wanted = math.inf
    else:
        wanted = target / (1 - target) * trailing_market_volume
    passive = PassiveIntent(0, _nearest_bucket(wanted, cfg))
    if participation < target - cfg.pov_band:
        return ActionSpec(passive=passive, aggressive=_nearest_bucket(wanted, cfg))
    return ActionSpec(passive=passive)


def _nearest_bucket(qty: float, cfg: EnvConfig) -> SizeBucket:
    if abs(cfg.small_size - qty) <= abs(cfg.large_size - qty):
        return SizeBucket.SMALL
    return SizeBucket.LARGE
