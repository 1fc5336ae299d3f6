"""Gradient-free parameter search with successive halving.

Trials are sampled up front from a parameter space, evaluated on a growing
number of episodes, and the worse ones are dropped after every rung. Episode
seeds derive from (study seed, trial index, rung, episode), never from the
order in which work happens to be scheduled, so a study gives the same ledger
serially, in parallel, or after a resume.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import rng as rngmod
from .cerl import Utility
from .errors import ConfigError

Objective = Callable[[dict, int], float]

PENDING, RUNNING, STOPPED, COMPLETED = "pending", "running", "stopped", "completed"
WORKERS_ENV = "EXEC_SIM_WORKERS"


@dataclass(frozen=True)
class Continuous:
    name: str
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo >= self.hi:
            raise ConfigError(f"search.space.{self.name}", f"need finite lo < hi, got ({self.lo}, {self.hi})")

    def draw(self, gen: np.random.Generator) -> float:
        return float(self.lo + (self.hi - self.lo) * gen.random())


@dataclass(frozen=True)
class Categorical:
    name: str
    values: tuple

    def __post_init__(self) -> None:
        if not self.values:
            raise ConfigError(f"search.space.{self.name}", "categorical dimension needs at least one value")

    def draw(self, gen: np.random.Generator) -> Any:
        return self.values[int(gen.integers(len(self.values)))]


Dim = Union[Continuous, Categorical]


@dataclass(frozen=True)
class ParamSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self) -> None:
        if not self.dims:
            raise ConfigError("search.space", "needs at least one dimension")
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise ConfigError("search.space", "dimension names must be unique")

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]


def sample_params(space: ParamSpace, n: int, seed: int) -> list[dict]:
    """``n`` independent uniform points. Point i depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    points = []
    for i in range(n):
        gen = rngmod.stream(seed, i, purpose="sample")
        points.append({d.name: d.draw(gen) for d in space.dims})
    return points


def estimate(rewards: Sequence[float], utility: Optional[Utility] = None) -> float:
    """Mean episodic reward, or its certainty equivalent under ``utility``."""
    values = np.asarray(rewards, dtype=float)
    if values.size == 0:
        raise ValueError("no episodes to estimate from")
    if utility is None:
        return float(values.mean())
    return float(utility.ce(values, np.full(values.size, 1.0 / values.size)))


def episode_rewards(objective: Objective, params: dict, seeds: Sequence[int]) -> list[float]:
    return [float(objective(params, int(s))) for s in seeds]


def run_trial(
    objective: Objective,
    params: dict,
    seeds: Sequence[int],
    episodes: int = 1,
    utility: Optional[Utility] = None,
) -> float:
    """Estimate over ``episodes`` episodes per seed.

    With one episode the objective sees the seed itself; otherwise episode j
    of seed s runs on ``derive_seed(s, j)``.
    """
    if episodes < 1 or not seeds:
        raise ValueError("need at least one seed and one episode")
    if episodes == 1:
        run_seeds = list(seeds)
    else:
        run_seeds = [rngmod.derive_seed(s, j) for s in seeds for j in range(episodes)]
    return estimate(episode_rewards(objective, params, run_seeds), utility)


# -- successive halving ---------------------------------------------------------
@dataclass(frozen=True)
class HalvingConfig:
    n_initial: int
    eta: int = 4
    rungs: int = 3
    episodes_per_rung: tuple[int, ...] = (1, 1, 1)

    def __post_init__(self) -> None:
        if self.eta < 2:
            raise ConfigError("search.eta", f"must be >= 2, got {self.eta}")
        if self.rungs < 1:
            raise ConfigError("search.rungs", f"must be >= 1, got {self.rungs}")
        if len(self.episodes_per_rung) != self.rungs:
            raise ConfigError("search.episodes_per_rung", f"needs one entry per rung ({self.rungs})")
        if any(e < 1 for e in self.episodes_per_rung):
            raise ConfigError("search.episodes_per_rung", "entries must be >= 1")
        if any(b < a for a, b in zip(self.episodes_per_rung, self.episodes_per_rung[1:])):
            raise ConfigError("search.episodes_per_rung", "must be non-decreasing")
        if self.n_initial < self.eta ** (self.rungs - 1):
            raise ConfigError(
                "search.n_initial",
                f"must be >= eta^(rungs-1) = {self.eta ** (self.rungs - 1)} so the last rung is nonempty",
            )

    def survivors(self) -> list[int]:
        counts = [self.n_initial]
        for _ in range(1, self.rungs):
            counts.append(math.ceil(counts[-1] / self.eta))
        return counts

    def budget(self) -> int:
        """Upper bound on episodes a study can consume."""
        return sum(n * e for n, e in zip(self.survivors(), self.episodes_per_rung))


@dataclass
class Trial:
    index: int
    params: dict
    status: str = PENDING
    rewards: list[float] = field(default_factory=list)
    rung: int = -1  # last rung evaluated
    utility_estimate: Optional[float] = None
    error: Optional[str] = None

    @property
    def episodes_run(self) -> int:
        return len(self.rewards)

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class StudyResult:
    best: Trial
    trials: list[Trial]
    ledger: list[dict]

    @property
    def episodes_used(self) -> int:
        return sum(t.episodes_run for t in self.trials)


def resolve_workers(workers: Optional[int] = None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else 1
    if workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {workers}")
    return workers


def _evaluate(objective: Objective, params: dict, seeds: list[int]) -> tuple[Optional[list[float]], Optional[str]]:
    try:
        return episode_rewards(objective, params, seeds), None
    except Exception as exc:  # a failing trial must not take the study down
        return None, f"{type(exc).__name__}: {exc}"


def _rank(trials: list[Trial]) -> list[Trial]:
    """Best first; failures last; ties to the lower trial index."""
    return sorted(
        trials,
        key=lambda t: (t.failed, -(t.utility_estimate if t.utility_estimate is not None else -math.inf), t.index),
    )


def _episode_seeds(seed: int, trial: int, rung: int, n: int) -> list[int]:
    return [rngmod.derive_seed(seed, trial, rung, j) for j in range(n)]


def _ledger_row(trial: Trial, rung: int, names: list[str]) -> dict:
    row = {"trial_index": trial.index, "rung": rung}
    row.update({f"param_{n}": trial.params[n] for n in names})
    row.update(
        episodes=trial.episodes_run,
        utility=trial.utility_estimate,
        status=trial.status,
        error=trial.error or "",
    )
    return row


def write_ledger_csv(ledger: list[dict], path: str | Path) -> None:
    if not ledger:
        raise ValueError("empty ledger")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(ledger[0]), lineterminator="\n")
        writer.writeheader()
        for row in ledger:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _checkpoint_payload(seed: int, cfg: HalvingConfig, rung: int, trials: list[Trial], ledger: list[dict]) -> dict:
    return {
        "study_seed": seed,
        "config": asdict(cfg),
        "completed_rung": rung,
        "trials": [asdict(t) for t in trials],
        "ledger": ledger,
    }


def _write_json_atomic(payload: dict, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1))
    os.replace(tmp, path)


def _load_checkpoint(path: Path, seed: int, cfg: HalvingConfig) -> tuple[int, list[Trial], list[dict]]:
    payload = json.loads(path.read_text())
    if payload["study_seed"] != seed or payload["config"] != json.loads(json.dumps(asdict(cfg))):
        raise ValueError(f"checkpoint {path} belongs to a different study")
    trials = [Trial(**t) for t in payload["trials"]]
    return payload["completed_rung"], trials, payload["ledger"]


def successive_halving(
    objective: Objective,
    space: ParamSpace,
    cfg: HalvingConfig,
    seed: int,
    utility: Optional[Utility] = None,
    workers: Optional[int] = None,
    checkpoint: Optional[str | Path] = None,
    resume: bool = False,
    evaluation_order: Optional[Callable[[list[int]], list[int]]] = None,
) -> StudyResult:
    """Run a study and return the final-rung winner with every trial record.

    ``episodes_per_rung[r]`` new episodes are added to each surviving trial at
    rung r and estimates are taken over all episodes so far. ``checkpoint``
    is rewritten after each rung; with ``resume`` a matching checkpoint picks
    up after its last completed rung. ``evaluation_order`` permutes the order
    trials are dispatched in and exists to check that it does not matter.
    """
    workers = resolve_workers(workers)
    names = space.names
    ckpt = Path(checkpoint) if checkpoint is not None else None

    start_rung = 0
    if resume and ckpt is not None and ckpt.exists():
        done_rung, trials, ledger = _load_checkpoint(ckpt, seed, cfg)
        start_rung = done_rung + 1
    else:
        trials = [Trial(i, p) for i, p in enumerate(sample_params(space, cfg.n_initial, seed))]
        ledger = []

    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rung in range(start_rung, cfg.rungs):
            active = [t for t in trials if t.status in (PENDING, RUNNING)]
            n_eps = cfg.episodes_per_rung[rung]
            jobs = {t.index: _episode_seeds(seed, t.index, rung, n_eps) for t in active}
            order = [t.index for t in active]
            if evaluation_order is not None:
                order = evaluation_order(order)
            if pool is None:
                results = {i: _evaluate(objective, trials[i].params, jobs[i]) for i in order}
            else:
                futures = {i: pool.submit(_evaluate, objective, trials[i].params, jobs[i]) for i in order}
                results = {i: f.result() for i, f in futures.items()}

            for t in active:
                rewards, error = results[t.index]
                t.status = RUNNING
                t.rung = rung
                if error is not None:
                    t.error = error
                    t.status = STOPPED
                    continue
                t.rewards.extend(rewards)
                t.utility_estimate = estimate(t.rewards, utility)

            ranked = _rank(active)
            last = rung == cfg.rungs - 1
            keep = len(ranked) if last else math.ceil(len(ranked) / cfg.eta)
            for pos, t in enumerate(ranked):
                if t.failed:
                    continue
                if pos >= keep:
                    t.status = STOPPED
                elif last:
                    t.status = COMPLETED
            ledger.extend(_ledger_row(t, rung, names) for t in sorted(active, key=lambda t: t.index))
            if ckpt is not None:
                _write_json_atomic(_checkpoint_payload(seed, cfg, rung, trials, ledger), ckpt)
    finally:
        if pool is not None:
            pool.shutdown()

    finalists = [t for t in trials if t.status == COMPLETED]
    if not finalists:
        raise RuntimeError("every trial failed; see the ledger for diagnostics")
    best = _rank(finalists)[0]
    return StudyResult(best, trials, ledger)
