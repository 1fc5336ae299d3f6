"""Certainty-equivalent reinforcement learning.

Outcomes are ranked by their certainty equivalent ``U^-1(E[U(X)])`` rather
than their mean. The Bellman backup nests the CE recursively::

    CE(s, a) = U^-1 E[ U(r + max_a' CE(s', a')) ]

which reduces to ordinary expected-value backups for the identity utility.
Exponential (CARA) utilities are evaluated in log space.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Optional, Protocol, Sequence

import numpy as np

from . import rng as rngmod
from .errors import DomainError, UnsupportedInputError

TIE_TOL = 1e-12
EXP_SAFE = 700.0


# -- utilities ---------------------------------------------------------------
class Utility:
    """Strictly increasing utility with an inverse."""

    name = "utility"

    def value(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def ce(self, values, probs) -> float:
        values = np.asarray(values, dtype=float)
        probs = np.asarray(probs, dtype=float)
        return float(self.inverse(np.dot(probs, self.value(values))))


@dataclass(frozen=True)
class Identity(Utility):
    name = "identity"

    def value(self, x):
        return x

    def inverse(self, y):
        return y

    def ce(self, values, probs) -> float:
        return float(np.dot(np.asarray(probs, dtype=float), np.asarray(values, dtype=float)))


@dataclass(frozen=True)
class Exponential(Utility):
    """CARA utility ``-exp(-lam * x)``. Safe for ``|lam * x| <= 700``."""

    lam: float = 1.0
    name = "exponential"

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"risk aversion must be positive, got {self.lam}")

    def value(self, x):
        return -np.exp(-self.lam * np.asarray(x, dtype=float))

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y >= 0):
            raise DomainError("exponential utility inverse needs negative input")
        out = -np.log(-y) / self.lam
        return float(out) if out.ndim == 0 else out

    def ce(self, values, probs) -> float:
        z = -self.lam * np.asarray(values, dtype=float)
        p = np.asarray(probs, dtype=float)
        shift = z.max()
        return float(-(shift + math.log(np.dot(p, np.exp(z - shift)))) / self.lam)


@dataclass(frozen=True)
class Power(Utility):
    """``x ** eta`` on ``x >= 0`` with ``0 < eta < 1``."""

    eta: float = 0.5
    name = "power"

    def __post_init__(self) -> None:
        if not 0 < self.eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise DomainError("power utility is defined on x >= 0")
        out = x**self.eta
        return float(out) if out.ndim == 0 else out

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y < 0):
            raise DomainError("power utility inverse needs y >= 0")
        out = y ** (1.0 / self.eta)
        return float(out) if out.ndim == 0 else out


def make_utility(kind: str, **params: float) -> Utility:
    if kind == "identity":
        return Identity()
    if kind == "exponential":
        return Exponential(params.get("lam", 1.0))
    if kind == "power":
        return Power(params.get("eta", 0.5))
    raise ValueError(f"unknown utility {kind!r}")


# -- outcome distributions -----------------------------------------------------
@dataclass(frozen=True)
class OutcomeDist:
    values: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.values) != len(self.probs) or not self.values:
            raise ValueError("values and probs must be nonempty and of equal length")
        if any(p <= 0 for p in self.probs):
            raise ValueError("probabilities must be positive")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {math.fsum(self.probs)}, not 1")

    @classmethod
    def point(cls, value: float) -> "OutcomeDist":
        return cls((float(value),), (1.0,))

    @classmethod
    def of(cls, pairs: Iterable[tuple[float, float]]) -> "OutcomeDist":
        pairs = list(pairs)
        return cls(tuple(float(v) for v, _ in pairs), tuple(float(p) for _, p in pairs))

    def mean(self) -> float:
        return math.fsum(v * p for v, p in zip(self.values, self.probs))


def ce(dist: OutcomeDist, u: Utility) -> float:
    """Certainty equivalent ``U^-1(sum p_i U(v_i))``."""
    return u.ce(dist.values, dist.probs)


def delayed_reward_ce(
    mu: float,
    sigma2_per_step: float,
    delay_steps: int,
    u: Utility,
    n_samples: int = 200_000,
    seed: int = 0,
) -> float:
    """CE of a Gaussian reward whose variance grows linearly with its delay.

    Closed form for identity and exponential utilities, fixed-seed Monte
    Carlo otherwise.
    """
    if sigma2_per_step < 0 or delay_steps < 0:
        raise ValueError("variance and delay must be non-negative")
    var = sigma2_per_step * delay_steps
    if var == 0 or isinstance(u, Identity):
        return float(mu)
    if isinstance(u, Exponential):
        return mu - u.lam * var / 2
    samples = mu + math.sqrt(var) * rngmod.stream(seed, delay_steps).standard_normal(n_samples)
    return u.ce(samples, np.full(n_samples, 1.0 / n_samples))


# -- finite MDPs ---------------------------------------------------------------
@dataclass
class FiniteMDP:
    """Tabular decision process.

    ``transitions[s, a, s']`` are probabilities; ``rewards[(s, a, s')]`` are
    outcome distributions (missing entries mean a sure zero). Terminal states
    absorb with zero reward.
    """

    n_states: int
    n_actions: int
    transitions: np.ndarray
    rewards: dict[tuple[int, int, int], OutcomeDist] = field(default_factory=dict)
    terminal: frozenset[int] = frozenset()
    horizon: Optional[int] = None

    def __post_init__(self) -> None:
        self.transitions = np.asarray(self.transitions, dtype=float)
        if self.transitions.shape != (self.n_states, self.n_actions, self.n_states):
            raise ValueError("transitions must have shape (S, A, S)")
        if np.any(self.transitions < 0) or not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("each transition row must be a probability distribution")
        self.terminal = frozenset(self.terminal)
        for s in self.terminal:
            if not np.all(self.transitions[s, :, s] == 1.0):
                raise ValueError(f"terminal state {s} must be self-absorbing")
            for a in range(self.n_actions):
                d = self.reward(s, a, s)
                if d.values != (0.0,):
                    raise ValueError(f"terminal state {s} must carry zero reward")
        if self.horizon is not None and self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    def reward(self, s: int, a: int, s2: int) -> OutcomeDist:
        return self.rewards.get((s, a, s2), _ZERO)


_ZERO = OutcomeDist.point(0.0)


@dataclass
class CEResult:
    values: np.ndarray  # CE of each state at the first decision
    policy: np.ndarray  # greedy action at the first decision
    q: np.ndarray  # CE(s, a) at the first decision
    stage_values: Optional[np.ndarray] = None  # (T + 1, S) for finite horizons
    stage_policy: Optional[np.ndarray] = None  # (T, S)


def _greedy(row: np.ndarray, allowed: Optional[Sequence[int]] = None) -> int:
    """Argmax with ties (within TIE_TOL) broken toward the lowest index."""
    idx = range(len(row)) if allowed is None else allowed
    best = max(row[a] for a in idx)
    tol = TIE_TOL * max(1.0, abs(best))
    for a in idx:
        if row[a] >= best - tol:
            return a
    raise AssertionError("unreachable")


def _backup(mdp: FiniteMDP, u: Utility, s: int, next_values: np.ndarray, gamma: float) -> np.ndarray:
    q = np.empty(mdp.n_actions)
    for a in range(mdp.n_actions):
        vals, probs = [], []
        for s2 in np.flatnonzero(mdp.transitions[s, a]):
            p = mdp.transitions[s, a, s2]
            d = mdp.reward(s, a, s2)
            for r, pr in zip(d.values, d.probs):
                vals.append(r + gamma * next_values[s2])
                probs.append(p * pr)
        q[a] = u.ce(vals, probs)
    return q


def _topological_order(mdp: FiniteMDP) -> list[int]:
    live = [s for s in range(mdp.n_states) if s not in mdp.terminal]
    succ = {s: {int(s2) for s2 in np.flatnonzero(mdp.transitions[s].sum(axis=0)) if s2 not in mdp.terminal} for s in live}
    order, mark = [], {}

    def visit(s: int) -> None:
        state = mark.get(s)
        if state == 1:
            raise UnsupportedInputError("MDP has a cycle among non-terminal states and no horizon")
        if state == 2:
            return
        mark[s] = 1
        for s2 in sorted(succ[s]):
            visit(s2)
        mark[s] = 2
        order.append(s)

    for s in live:
        visit(s)
    return order  # successors come first


def ce_value_iteration(mdp: FiniteMDP, u: Utility, gamma: float = 1.0) -> CEResult:
    """Exact CE dynamic programming by backward induction.

    Finite-horizon MDPs are solved stage by stage. Without a horizon the
    non-terminal transition graph must be acyclic so every episode ends;
    states are then solved in reverse topological order.
    """
    S, A = mdp.n_states, mdp.n_actions
    if mdp.horizon is not None:
        T = mdp.horizon
        stage_values = np.zeros((T + 1, S))
        stage_policy = np.zeros((T, S), dtype=int)
        q = np.zeros((S, A))
        for t in range(T - 1, -1, -1):
            for s in range(S):
                if s in mdp.terminal:
                    q[s] = 0.0
                    continue
                q[s] = _backup(mdp, u, s, stage_values[t + 1], gamma)
                a = _greedy(q[s])
                stage_policy[t, s] = a
                stage_values[t, s] = q[s, a]
        return CEResult(stage_values[0].copy(), stage_policy[0].copy() if T else np.zeros(S, dtype=int), q, stage_values, stage_policy)

    values = np.zeros(S)
    policy = np.zeros(S, dtype=int)
    q = np.zeros((S, A))
    for s in _topological_order(mdp):
        q[s] = _backup(mdp, u, s, values, gamma)
        policy[s] = _greedy(q[s])
        values[s] = q[s, policy[s]]
    return CEResult(values, policy, q)


# -- sample-based learning -----------------------------------------------------
class DiscreteEnv(Protocol):
    def reset(self, seed: int) -> Any: ...

    def step(self, action: int) -> Any: ...


@dataclass
class Transition:
    obs: Any
    reward: float
    done: bool


class MDPEnv:
    """Samples a FiniteMDP. Observations are ``(t, s)`` with a horizon, else ``s``."""

    def __init__(self, mdp: FiniteMDP, start_state: int = 0) -> None:
        self.mdp = mdp
        self.start_state = start_state
        self.n_actions = mdp.n_actions

    def _obs(self):
        return (self.t, self.s) if self.mdp.horizon is not None else self.s

    def reset(self, seed: int):
        self.gen = rngmod.stream(seed)
        self.s = self.start_state
        self.t = 0
        return self._obs()

    def step(self, action: int) -> Transition:
        mdp = self.mdp
        s2 = int(self.gen.choice(mdp.n_states, p=mdp.transitions[self.s, action]))
        d = mdp.reward(self.s, action, s2)
        r = d.values[int(self.gen.choice(len(d.values), p=d.probs))] if len(d.values) > 1 else d.values[0]
        self.s = s2
        self.t += 1
        done = s2 in mdp.terminal or (mdp.horizon is not None and self.t >= mdp.horizon)
        return Transition(self._obs(), float(r), done)


@dataclass
class QTable:
    """CE action values with their utility-space running estimates."""

    n_actions: int
    utility: Utility
    init_ce: float = 0.0
    ce_values: dict[Hashable, np.ndarray] = field(default_factory=dict)
    m_values: dict[Hashable, np.ndarray] = field(default_factory=dict)
    visits: dict[Hashable, np.ndarray] = field(default_factory=dict)

    def row(self, state: Hashable) -> np.ndarray:
        if state not in self.ce_values:
            self.ce_values[state] = np.full(self.n_actions, float(self.init_ce))
            self.m_values[state] = np.full(self.n_actions, float(self.utility.value(self.init_ce)))
            self.visits[state] = np.zeros(self.n_actions, dtype=np.int64)
        return self.ce_values[state]

    def greedy(self, state: Hashable, allowed: Optional[Sequence[int]] = None) -> int:
        row = self.ce_values.get(state)
        if row is None:
            row = np.full(self.n_actions, float(self.init_ce))
        return _greedy(row, allowed)

    def best_value(self, state: Hashable, allowed: Optional[Sequence[int]] = None) -> float:
        row = self.ce_values.get(state)
        if row is None:
            return float(self.init_ce)
        return float(row[_greedy(row, allowed)])

    def update(self, state: Hashable, action: int, target: float, alpha: float) -> None:
        self.row(state)
        self.visits[state][action] += 1
        if alpha == 0:
            return
        m = self.m_values[state]
        m[action] += alpha * (self.utility.value(target) - m[action])
        self.ce_values[state][action] = self.utility.inverse(m[action])

    def copy(self) -> "QTable":
        return QTable(
            self.n_actions,
            self.utility,
            self.init_ce,
            {k: v.copy() for k, v in self.ce_values.items()},
            {k: v.copy() for k, v in self.m_values.items()},
            {k: v.copy() for k, v in self.visits.items()},
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("state", "action", "ce_value", "m_value", "visits"))
            for state in sorted(self.ce_values, key=_state_key):
                for a in range(self.n_actions):
                    writer.writerow(
                        (
                            _state_key(state),
                            a,
                            repr(float(self.ce_values[state][a])),
                            repr(float(self.m_values[state][a])),
                            int(self.visits[state][a]),
                        )
                    )

    @classmethod
    def from_csv(cls, path: str | Path, utility: Utility, n_actions: int, init_ce: float = 0.0) -> "QTable":
        table = cls(n_actions, utility, init_ce)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                state = _parse_state(rec["state"])
                table.row(state)
                a = int(rec["action"])
                table.ce_values[state][a] = float(rec["ce_value"])
                table.m_values[state][a] = float(rec["m_value"])
                table.visits[state][a] = int(rec["visits"])
        return table


def _state_key(state: Hashable) -> str:
    return json.dumps(list(state) if isinstance(state, tuple) else state)


def _parse_state(text: str) -> Hashable:
    value = json.loads(text)
    return tuple(value) if isinstance(value, list) else value


def constant(value: float) -> Callable[[int], float]:
    return lambda _: value


def harmonic(power: float = 1.0, floor: float = 0.0) -> Callable[[int], float]:
    """Learning rate ``max(n ** -power, floor)`` for the n-th visit."""
    return lambda n: max(n ** (-power), floor)


def linear_decay(start: float, end: float, episodes: int) -> Callable[[int], float]:
    def schedule(ep: int) -> float:
        if episodes <= 1:
            return end
        frac = min(ep / (episodes - 1), 1.0)
        return start + (end - start) * frac

    return schedule


def ce_q_learning(
    env: DiscreteEnv,
    u: Utility,
    episodes: int,
    lr_schedule: Callable[[int], float] = harmonic(),
    exploration_schedule: Callable[[int], float] = constant(0.1),
    seed: int = 0,
    actions: Optional[Sequence[int]] = None,
    discretizer: Optional[Callable[[Any], Hashable]] = None,
    reward_fn: Optional[Callable[[Any], float]] = None,
    qtable: Optional[QTable] = None,
    max_steps: Optional[int] = None,
) -> QTable:
    """Epsilon-greedy Q-learning on CE action values.

    Keeps ``M(s, a)`` in utility space, updated toward
    ``U(r + max_a' CE(s', a'))``, and stores ``CE = U^-1(M)``. ``actions``
    restricts both exploration and the greedy max. ``reward_fn`` maps a step
    result to the reward to learn from (defaults to ``result.reward``).
    ``max_steps`` truncates episodes; the truncated step bootstraps to zero.
    ``lr_schedule`` receives the visit count of the (s, a) pair,
    ``exploration_schedule`` the episode index.
    """
    n_actions = getattr(env, "n_actions", None) or len(env.actions)
    allowed = list(range(n_actions)) if actions is None else list(actions)
    if not allowed:
        raise ValueError("action subspace must not be empty")
    table = qtable if qtable is not None else QTable(n_actions, u)
    gen = rngmod.stream(seed, purpose="exploration")

    def state_of(obs: Any) -> Hashable:
        if discretizer is not None:
            return discretizer(obs)
        try:
            hash(obs)
        except TypeError:
            raise ValueError("observation is not discrete; supply a discretizer") from None
        return obs

    for ep in range(episodes):
        obs = env.reset(rngmod.derive_seed(seed, ep))
        s = state_of(obs)
        eps = exploration_schedule(ep)
        done = False
        steps = 0
        while not done:
            if gen.random() < eps:
                a = allowed[int(gen.integers(len(allowed)))]
            else:
                a = table.greedy(s, allowed)
            result = env.step(a)
            steps += 1
            r = reward_fn(result) if reward_fn is not None else result.reward
            s2 = state_of(result.obs)
            done = result.done or (max_steps is not None and steps >= max_steps)
            target = r if done else r + table.best_value(s2, allowed)
            n = int(table.visits[s][a]) + 1 if s in table.visits else 1
            table.update(s, a, target, lr_schedule(n))
            s = s2
    return table
