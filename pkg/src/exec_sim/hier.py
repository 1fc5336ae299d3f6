"""Two-level execution agent.

Local policies act on a restricted slice of the action set and learn from
their own short-horizon rewards. A meta-policy maps a coarse view of the
episode to one of them and only re-decides when the active option's
termination condition fires.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .cerl import QTable, Utility, ce_q_learning, constant, harmonic, linear_decay
from .env import ACTIONS, ExecEnv, Observation, StepResult, pov_baseline

REWARD_KINDS = ("fill_price_vs_mid_at_decision", "spread_capture", "schedule_tracking", "execution")
TERMINATIONS = ("fixed_steps", "on_fill", "on_schedule_band_exit")

SCHEDULE_BAND = 0.05
BEHIND, ON, AHEAD = 0, 1, 2
BUCKET_GRID = list(itertools.product(range(4), range(4), range(3), range(2)))

PASSIVE_SUBSPACE = tuple(i for i, a in enumerate(ACTIONS) if a.aggressive is None)
AGGRESSIVE_SUBSPACE = tuple(i for i, a in enumerate(ACTIONS) if a.is_noop or a.kind == "aggressive")
FULL_SPACE = tuple(range(len(ACTIONS)))


PROGRESS_TIME_BINS = 8


def progress_state(obs: Observation) -> tuple[int, int]:
    """(remaining bin, time bin) with four remaining bins and eight time bins.

    The flat learner sees only progress. Time is binned finer than in
    ``coarse_state`` so the last few steps, where the terminal sweep is
    priced, are not aliased with the middle of the episode.
    """
    rem = min(int(obs.remaining_fraction * 4), 3)
    tim = min(int(obs.time_fraction * PROGRESS_TIME_BINS), PROGRESS_TIME_BINS - 1)
    return rem, tim


def coarse_state(obs: Observation) -> tuple[int, int, int, int]:
    """(remaining bin, time bin, schedule bucket, spread bucket).

    Remaining and time fractions fall into four equal bins. Schedule
    deviation is behind / on / ahead with a closed band of +-0.05. Spread is
    one tick (0) or anything else (1).
    """
    rem = min(int(obs.remaining_fraction * 4), 3)
    tim = min(int(obs.time_fraction * 4), 3)
    dev = obs.schedule_deviation
    if dev < -SCHEDULE_BAND:
        sched = BEHIND
    elif dev > SCHEDULE_BAND:
        sched = AHEAD
    else:
        sched = ON
    spread = 0 if obs.spread_ticks == 1 else 1
    return rem, tim, sched, spread


@dataclass(frozen=True)
class Termination:
    kind: str = "fixed_steps"
    steps: int = 5

    def __post_init__(self) -> None:
        if self.kind not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.kind!r}")
        if self.steps < 1:
            raise ValueError("termination steps must be >= 1")


@dataclass(frozen=True)
class LocalPolicySpec:
    name: str
    action_subspace: tuple[int, ...]
    local_reward: str
    local_horizon: int
    termination: str = "fixed_steps"

    def __post_init__(self) -> None:
        if not self.action_subspace:
            raise ValueError(f"{self.name}: action subspace is empty")
        if any(not 0 <= a < len(ACTIONS) for a in self.action_subspace):
            raise ValueError(f"{self.name}: action index out of range")
        if self.local_reward not in REWARD_KINDS:
            raise ValueError(f"{self.name}: unknown reward {self.local_reward!r}")
        if self.local_horizon < 1:
            raise ValueError(f"{self.name}: local_horizon must be >= 1")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"{self.name}: unknown termination {self.termination!r}")


def default_specs(passive_horizon: int = 10, aggressive_horizon: int = 3) -> list[LocalPolicySpec]:
    """Passive placer (option 0) and aggressive taker (option 1).

    The taker gets a short horizon: over a long one, a timid first step can be
    made up later, which flattens its action values into the noise.
    """
    return [
        LocalPolicySpec("passive_placer", PASSIVE_SUBSPACE, "spread_capture", passive_horizon),
        LocalPolicySpec("aggressive_taker", AGGRESSIVE_SUBSPACE, "schedule_tracking", aggressive_horizon),
    ]


@dataclass
class LocalPolicy:
    spec: LocalPolicySpec
    table: QTable
    discretizer: Callable[[Observation], tuple] = coarse_state

    def act(self, obs: Observation) -> int:
        return self.table.greedy(self.discretizer(obs), self.spec.action_subspace)


class LocalRewardEnv:
    """ExecEnv view that swaps in a local reward and starts mid-episode.

    Each reset runs a short warm-up under a randomly chosen behaviour
    (uniform random, idle, or PoV) so local training sees states from the
    whole episode, not just its opening.
    """

    def __init__(self, env: ExecEnv, spec: LocalPolicySpec) -> None:
        if spec.local_reward == "schedule_tracking" and env.parent.pov_target <= 0:
            raise ValueError("schedule_tracking reward needs a positive pov_target")
        self.env = env
        self.spec = spec
        self.n_actions = len(ACTIONS)

    def reset(self, seed: int) -> Observation:
        env = self.env
        gen = rngmod.stream(seed, purpose="warmup")
        span = max(env.parent.horizon - self.spec.local_horizon, 0)
        warmup = int(gen.integers(0, span + 1))
        behaviour = int(gen.integers(3))
        obs = env.reset(seed)
        for _ in range(warmup):
            if behaviour == 0:
                a = int(gen.integers(len(ACTIONS)))
            elif behaviour == 1:
                a = 0
            else:
                a = pov_baseline(obs, env.parent, env.trailing_market_volume(), env.config)
            res = env.step(a)
            obs = res.obs
            if res.done:
                return env.reset(seed)
        return obs

    def _mid(self) -> float:
        mid = self.env.book.mid_half_ticks
        return mid / 2 if mid is not None else self.env.arrival_price

    def step(self, action: int) -> StepResult:
        env = self.env
        mid = self._mid()
        dev_before = abs(env.parent_state().schedule_deviation)
        res = env.step(action)
        res.reward = local_reward(self.spec.local_reward, env, res, mid, dev_before)
        return res


def local_reward(kind: str, env: ExecEnv, res: StepResult, mid: float, dev_before: float) -> float:
    sign = env.parent.side.sign
    fills = res.info.fills
    if kind == "execution":
        return res.reward
    if kind == "schedule_tracking":
        return dev_before - abs(env.parent_state().schedule_deviation)
    gain = sum(sign * (mid - p) * q for p, q in fills)
    if kind == "fill_price_vs_mid_at_decision":
        return gain / env.parent.total_qty
    qty = sum(q for _, q in fills)
    return gain / qty if qty else 0.0


def train_local(
    env: ExecEnv,
    spec: LocalPolicySpec,
    u: Utility,
    seed: int,
    episodes: int = 2000,
    lr_schedule: Callable[[int], float] | None = None,
    exploration_schedule: Callable[[int], float] | None = None,
) -> LocalPolicy:
    """CE Q-learning restricted to ``spec.action_subspace`` on the local reward."""
    wrapped = LocalRewardEnv(env, spec)
    table = ce_q_learning(
        wrapped,
        u,
        episodes,
        lr_schedule or harmonic(0.7, 0.02),
        exploration_schedule or constant(0.2),
        seed,
        actions=spec.action_subspace,
        discretizer=coarse_state,
        max_steps=spec.local_horizon,
    )
    return LocalPolicy(spec, table)


def train_flat(
    env: ExecEnv,
    u: Utility,
    seed: int,
    episodes: int = 6000,
    lr_schedule: Callable[[int], float] | None = None,
    exploration_schedule: Callable[[int], float] | None = None,
    discretizer: Callable[[Observation], tuple] = progress_state,
) -> LocalPolicy:
    """CE Q-learning over the full action set on the env's own reward and horizon.

    Exploration defaults to a linear decay from 0.5 to 0.02 over the run.
    """
    spec = LocalPolicySpec("flat", FULL_SPACE, "execution", env.parent.horizon)
    table = ce_q_learning(
        env,
        u,
        episodes,
        lr_schedule or harmonic(0.7, 0.02),
        exploration_schedule or linear_decay(0.5, 0.02, episodes),
        seed,
        discretizer=discretizer,
    )
    return LocalPolicy(spec, table, discretizer)


# -- meta level ----------------------------------------------------------------
@dataclass
class MetaPolicy:
    options: list[LocalPolicy]
    selector: dict[tuple[int, int, int, int], int]
    epoch_rule: Optional[Termination] = None

    def __post_init__(self) -> None:
        missing = [b for b in BUCKET_GRID if b not in self.selector]
        if missing:
            raise ValueError(f"selector is not total: {len(missing)} buckets unmapped, e.g. {missing[0]}")
        bad = {o for o in self.selector.values() if not 0 <= o < len(self.options)}
        if bad:
            raise ValueError(f"selector refers to unknown options {sorted(bad)}")

    def select(self, obs: Observation) -> int:
        return self.selector[coarse_state(obs)]

    def termination_for(self, option: int) -> Termination:
        if self.epoch_rule is not None:
            return self.epoch_rule
        spec = self.options[option].spec
        return Termination(spec.termination, spec.local_horizon)


def constant_selector(option: int) -> dict[tuple[int, int, int, int], int]:
    return {b: option for b in BUCKET_GRID}


def rule_selector(behind: int, otherwise: int) -> dict[tuple[int, int, int, int], int]:
    """Use ``behind`` whenever the schedule bucket is behind."""
    return {b: behind if b[2] == BEHIND else otherwise for b in BUCKET_GRID}


SELECTOR_PARAMS = [f"sched{d}_spread{s}" for d in range(3) for s in range(2)]


def selector_from_params(params: dict) -> dict[tuple[int, int, int, int], int]:
    """Expand a (schedule bucket, spread bucket) -> option assignment to the full grid."""
    return {b: int(params[f"sched{b[2]}_spread{b[3]}"]) for b in BUCKET_GRID}


def write_selector_csv(selector: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("remaining_bin", "time_bin", "schedule_bucket", "spread_bucket", "option"))
        for bucket in BUCKET_GRID:
            writer.writerow((*bucket, selector[bucket]))


def read_selector_csv(path: str | Path) -> dict[tuple[int, int, int, int], int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return {
            (
                int(r["remaining_bin"]),
                int(r["time_bin"]),
                int(r["schedule_bucket"]),
                int(r["spread_bucket"]),
            ): int(r["option"])
            for r in reader
        }


@dataclass
class HierarchicalAgent:
    meta: MetaPolicy
    active_option: Optional[int] = None
    steps_in_option: int = 0
    switches: int = 0
    selections: list[int] = field(default_factory=list)  # steps where the selector ran

    def reset(self) -> None:
        self.active_option = None
        self.steps_in_option = 0
        self.switches = 0
        self.selections = []
        self._start_bucket = None
        self._last_filled = 0

    def _terminated(self, obs: Observation) -> bool:
        rule = self.meta.termination_for(self.active_option)
        if self.steps_in_option >= rule.steps:
            return True
        if rule.kind == "on_fill":
            return self._last_filled > 0
        if rule.kind == "on_schedule_band_exit":
            return coarse_state(obs)[2] != self._start_bucket
        return False

    def act(self, obs: Observation, step: int) -> int:
        if self.active_option is None or self._terminated(obs):
            choice = self.meta.select(obs)
            if self.active_option is not None and choice != self.active_option:
                self.switches += 1
            self.active_option = choice
            self.steps_in_option = 0
            self._start_bucket = coarse_state(obs)[2]
            self.selections.append(step)
        self.steps_in_option += 1
        return self.meta.options[self.active_option].act(obs)

    def observe(self, result: StepResult) -> None:
        self._last_filled = result.info.filled_this_step


def run_hierarchical(env: ExecEnv, agent: HierarchicalAgent, seed: int) -> list[tuple[int, int, int, float]]:
    """Roll out one episode; returns (step, option, action, reward) rows.

    The env keeps the full per-step trace with the option column filled in.
    """
    obs = env.reset(seed)
    agent.reset()
    rows = []
    done = False
    while not done:
        step = env.step_index
        action = agent.act(obs, step)
        res = env.step(action)
        agent.observe(res)
        env.trace[-1].option = agent.active_option
        rows.append((step, agent.active_option, action, res.reward))
        obs, done = res.obs, res.done
    return rows


def run_flat(env: ExecEnv, policy: LocalPolicy, seed: int) -> list[tuple[int, int, float]]:
    """(step, action, reward) rows for a single local policy acting alone."""
    obs = env.reset(seed)
    rows = []
    done = False
    while not done:
        step = env.step_index
        action = policy.act(obs)
        res = env.step(action)
        rows.append((step, action, res.reward))
        obs, done = res.obs, res.done
    return rows


def option_frequencies(rows: Sequence[tuple[int, int, int, float]], n_options: int) -> np.ndarray:
    counts = np.bincount([r[1] for r in rows], minlength=n_options)
    return counts / max(len(rows), 1)
