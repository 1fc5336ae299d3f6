"""Scenario orchestration: training, meta search, evaluation, replay.

All randomness comes from the config seeds. Output files carry a header row
and are written in a fixed order so two runs of the same config produce the
same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from . import __version__
from . import rng as rngmod
from .book import export_events_jsonl, export_trades_csv
from .cerl import QTable, harmonic, linear_decay
from .config import ExperimentConfig
from .env import ACTIONS, ExecEnv, Observation, StepResult, pov_baseline, write_trace_csv
from .errors import DomainError
from .flow import init_sim, step_background
from .hier import (
    SELECTOR_PARAMS,
    HierarchicalAgent,
    LocalPolicy,
    LocalPolicySpec,
    MetaPolicy,
    Termination,
    default_specs,
    progress_state,
    read_selector_csv,
    selector_from_params,
    train_flat,
    train_local,
    write_selector_csv,
)
from .search import Categorical, ParamSpace, StudyResult, successive_halving, write_ledger_csv

PROXY_NOTE = (
    "slippage_per_share and participation_error are proxy metrics for execution quality; "
    "they are not a best-execution determination; exec_vwap is all-in, pricing any unfilled remainder "
    "at its terminal liquidation"
)
FLAT_TABLE = "flat_q.csv"
SELECTOR_FILE = "selector.csv"
LEDGER_FILE = "search_ledger.csv"
CHECKPOINT_FILE = "search_checkpoint.json"
EPISODES_FILE = "episodes.csv"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"
TRACE_DIR = "traces"

REPORT_COLUMNS = (
    "seed",
    "filled_fraction",
    "exec_vwap",
    "market_vwap",
    "slippage_per_share",
    "participation",
    "participation_error",
    "total_reward",
    "option_switches",
)
REPLAY_COLUMNS = ("step", "best_bid", "best_ask", "passive_price", "fill_price", "fill_qty")


class MissingArtifactError(RuntimeError):
    """A trained table or selector the agent needs is not on disk."""


class MalformedTraceError(ValueError):
    """A trace file does not have the expected columns or values."""


# -- agents ---------------------------------------------------------------------
class Agent(Protocol):
    def reset(self, env: ExecEnv, seed: int) -> None: ...

    def act(self, env: ExecEnv, obs: Observation): ...

    def observe(self, env: ExecEnv, result: StepResult) -> None: ...


class PovAgent:
    def reset(self, env, seed):
        pass

    def act(self, env, obs):
        return pov_baseline(obs, env.parent, env.trailing_market_volume(), env.config)

    def observe(self, env, result):
        pass


class RandomAgent:
    """Uniform over the enumerated actions, from its own per-seed stream."""

    def reset(self, env, seed):
        self.gen = rngmod.stream(seed, purpose="random_agent")

    def act(self, env, obs):
        return int(self.gen.integers(len(ACTIONS)))

    def observe(self, env, result):
        pass


@dataclass
class PolicyAgent:
    policy: LocalPolicy

    def reset(self, env, seed):
        pass

    def act(self, env, obs):
        return self.policy.act(obs)

    def observe(self, env, result):
        pass


class MetaAgent:
    def __init__(self, meta: MetaPolicy) -> None:
        self.inner = HierarchicalAgent(meta)

    def reset(self, env, seed):
        self.inner.reset()

    def act(self, env, obs):
        return self.inner.act(obs, env.step_index)

    def observe(self, env, result):
        self.inner.observe(result)
        env.trace[-1].option = self.inner.active_option

    @property
    def switches(self) -> int:
        return self.inner.switches


@dataclass(frozen=True)
class EpisodeReport:
    seed: int
    filled_fraction: float
    exec_vwap: Optional[float]
    market_vwap: Optional[float]
    slippage_per_share: float
    participation: float
    participation_error: float
    total_reward: float
    option_switches: Optional[int] = None


def make_env(cfg: ExperimentConfig) -> ExecEnv:
    return ExecEnv(cfg.flow, cfg.parent, cfg.env)


def run_episode(env: ExecEnv, agent: Agent, seed: int) -> EpisodeReport:
    obs = env.reset(seed)
    agent.reset(env, seed)
    done = False
    while not done:
        result = env.step(agent.act(env, obs))
        agent.observe(env, result)
        obs, done = result.obs, result.done
    return episode_report(env, seed, getattr(agent, "switches", None))


def episode_report(env: ExecEnv, seed: int, switches: Optional[int] = None) -> EpisodeReport:
    parent = env.parent
    exec_price = env.all_in_exec_price
    bench = env.market_vwap if env.market_vwap is not None else env.arrival_price
    slippage = parent.side.sign * (bench - exec_price) if exec_price is not None else 0.0
    return EpisodeReport(
        seed=seed,
        filled_fraction=env.filled / parent.total_qty,
        exec_vwap=exec_price,
        market_vwap=env.market_vwap,
        slippage_per_share=slippage,
        participation=env.participation,
        participation_error=abs(env.participation - parent.pov_target),
        total_reward=env.total_reward,
        option_switches=switches,
    )


# -- training artifacts ---------------------------------------------------------
def _schedules(cfg: ExperimentConfig, episodes: int):
    t = cfg.training
    return harmonic(t.lr_power, t.lr_floor), linear_decay(t.exploration, 0.02, episodes)


def option_specs(cfg: ExperimentConfig) -> list[LocalPolicySpec]:
    return default_specs(cfg.training.passive_horizon, cfg.training.aggressive_horizon)


def option_path(out: Path, spec: LocalPolicySpec) -> Path:
    return out / f"option_{spec.name}.csv"


def train_flat_table(cfg: ExperimentConfig, out: Path) -> LocalPolicy:
    episodes = cfg.training.flat_episodes
    lr, explore = _schedules(cfg, episodes)
    policy = train_flat(make_env(cfg), cfg.utility.build(), cfg.training.seed, episodes, lr, explore)
    out.mkdir(parents=True, exist_ok=True)
    policy.table.to_csv(out / FLAT_TABLE)
    return policy


def train_options(cfg: ExperimentConfig, out: Path, reuse: bool = False) -> list[LocalPolicy]:
    """Train (or with ``reuse``, load already trained) default local policies."""
    out.mkdir(parents=True, exist_ok=True)
    u = cfg.utility.build()
    episodes = cfg.training.local_episodes
    options = []
    for k, spec in enumerate(option_specs(cfg)):
        path = option_path(out, spec)
        if reuse and path.exists():
            options.append(LocalPolicy(spec, QTable.from_csv(path, u, len(ACTIONS))))
            continue
        lr, explore = _schedules(cfg, episodes)
        seed = rngmod.derive_seed(cfg.training.seed, k)
        policy = train_local(make_env(cfg), spec, u, seed, episodes, lr, explore)
        policy.table.to_csv(path)
        options.append(policy)
    return options


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found: {path} (run train-local / search-meta first)")
    return path


def load_flat(cfg: ExperimentConfig, out: Path) -> LocalPolicy:
    path = _require(out / FLAT_TABLE, "flat Q table")
    table = QTable.from_csv(path, cfg.utility.build(), len(ACTIONS))
    spec = LocalPolicySpec("flat", tuple(range(len(ACTIONS))), "execution", cfg.parent.horizon)
    return LocalPolicy(spec, table, progress_state)


def load_options(cfg: ExperimentConfig, out: Path) -> list[LocalPolicy]:
    u = cfg.utility.build()
    return [
        LocalPolicy(spec, QTable.from_csv(_require(option_path(out, spec), "option table"), u, len(ACTIONS)))
        for spec in option_specs(cfg)
    ]


def epoch_rule(cfg: ExperimentConfig) -> Optional[Termination]:
    steps = cfg.search.epoch_steps if cfg.search is not None else 5
    return Termination("fixed_steps", steps) if steps > 0 else None


def load_meta(cfg: ExperimentConfig, out: Path) -> MetaPolicy:
    options = load_options(cfg, out)
    selector = read_selector_csv(_require(out / SELECTOR_FILE, "meta selector"))
    return MetaPolicy(options, selector, epoch_rule(cfg))


def make_agent(cfg: ExperimentConfig, out: Path) -> Agent:
    if cfg.agent == "pov_baseline":
        return PovAgent()
    if cfg.agent == "random":
        return RandomAgent()
    if cfg.agent == "flat_cerl":
        return PolicyAgent(load_flat(cfg, out))
    return MetaAgent(load_meta(cfg, out))


# -- meta search ----------------------------------------------------------------
class MetaObjective:
    """Episode slippage of a selector built from search parameters. Picklable."""

    def __init__(self, cfg: ExperimentConfig, options: list[LocalPolicy]) -> None:
        self.cfg = cfg
        self.options = options

    def __call__(self, params: dict, seed: int) -> float:
        meta = MetaPolicy(self.options, selector_from_params(params), epoch_rule(self.cfg))
        return run_episode(make_env(self.cfg), MetaAgent(meta), seed).slippage_per_share


def meta_space(n_options: int) -> ParamSpace:
    return ParamSpace(tuple(Categorical(name, tuple(range(n_options))) for name in SELECTOR_PARAMS))


def search_meta(
    cfg: ExperimentConfig,
    out: Path,
    options: Optional[list[LocalPolicy]] = None,
    workers: Optional[int] = None,
    resume: bool = False,
) -> StudyResult:
    if cfg.search is None:
        raise MissingArtifactError("config has no search section")
    if options is None:
        options = load_options(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    study = successive_halving(
        MetaObjective(cfg, options),
        meta_space(len(options)),
        cfg.search.halving(),
        cfg.search.seed,
        utility=cfg.utility.build(),
        workers=workers,
        checkpoint=out / CHECKPOINT_FILE,
        resume=resume,
    )
    write_ledger_csv(study.ledger, out / LEDGER_FILE)
    write_selector_csv(selector_from_params(study.best.params), out / SELECTOR_FILE)
    return study


# -- evaluation -----------------------------------------------------------------
def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports_csv(reports: list[EpisodeReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])


def summarize(reports: list[EpisodeReport], cfg: ExperimentConfig) -> dict:
    slip = np.array([r.slippage_per_share for r in reports], dtype=float)
    err = np.array([r.participation_error for r in reports], dtype=float)
    try:
        ce_value = cfg.utility.build().ce(slip, np.full(slip.size, 1.0 / slip.size))
    except DomainError:
        ce_value = None  # e.g. power utility on negative slippage
    summary = {
        "agent": cfg.agent,
        "episodes": len(reports),
        "utility": asdict(cfg.utility),
        "slippage_mean": float(slip.mean()),
        "slippage_stdev": float(slip.std(ddof=1)) if slip.size > 1 else 0.0,
        "slippage_p5": float(np.percentile(slip, 5)),
        "slippage_p95": float(np.percentile(slip, 95)),
        "slippage_ce": ce_value,
        "participation_error_mean": float(err.mean()),
        "filled_fraction_mean": float(np.mean([r.filled_fraction for r in reports])),
        "note": PROXY_NOTE,
    }
    switches = [r.option_switches for r in reports if r.option_switches is not None]
    if switches:
        summary["option_switches_mean"] = float(np.mean(switches))
    return summary


def run_evaluate(cfg: ExperimentConfig, out: Path, write_traces: bool = True) -> tuple[dict, list[EpisodeReport]]:
    """Run every configured seed; write per-episode rows, a summary and traces."""
    agent = make_agent(cfg, out)
    env = make_env(cfg)
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = out / TRACE_DIR
    if write_traces:
        trace_dir.mkdir(exist_ok=True)
    extra = ("option",) if cfg.agent == "hierarchical" else ()
    reports = []
    for seed in cfg.seeds:
        reports.append(run_episode(env, agent, seed))
        if write_traces:
            write_trace_csv(env.trace, trace_dir / f"trace_{seed}.csv", extra)
    write_reports_csv(reports, out / EPISODES_FILE)
    summary = summarize(reports, cfg)
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n")
    return summary, reports


def run_pipeline(cfg: ExperimentConfig, out: Path, workers: Optional[int] = None, resume: bool = False) -> dict:
    """Options, then meta search, then evaluation of the winning hierarchy."""
    if cfg.search is None:
        raise MissingArtifactError("pipeline needs a search section in the config")
    stage = "train-local"
    try:
        options = train_options(cfg, out, reuse=resume)
        stage = "search-meta"
        search_meta(cfg, out, options, workers, resume)
        stage = "evaluate"
        summary, _ = run_evaluate(_as_hierarchical(cfg), out)
    except Exception as exc:
        raise type(exc)(f"[{stage}] {exc}") if _rewrappable(exc) else exc
    return summary


def _as_hierarchical(cfg: ExperimentConfig) -> ExperimentConfig:
    return replace(cfg, agent="hierarchical")


def _rewrappable(exc: Exception) -> bool:
    return type(exc) in (ValueError, RuntimeError, MissingArtifactError, MalformedTraceError, DomainError)


# -- background-only simulation -------------------------------------------------
def simulate(cfg: ExperimentConfig, out: Path) -> None:
    """Run the background flow alone for ``parent.horizon`` steps per seed."""
    sim_dir = out / "sim"
    sim_dir.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        state = init_sim(cfg.flow, seed)
        for _ in range(cfg.parent.horizon):
            step_background(state)
        export_events_jsonl(state.book.event_log, sim_dir / f"events_{seed}.jsonl")
        export_trades_csv(state.book.trade_log, sim_dir / f"trades_{seed}.csv")


# -- replay ---------------------------------------------------------------------
def _opt_int(text: str, column: str, line: int) -> Optional[int]:
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        raise MalformedTraceError(f"line {line}: {column} is not an integer: {text!r}") from None


def replay_rows(trace_path: str | Path) -> list[tuple]:
    """Plot-ready rows: one per fill, or one with empty fill fields per fill-less step."""
    rows = []
    with open(trace_path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"step", "best_bid", "best_ask", "passive_price", "fills"}
        missing = needed - set(reader.fieldnames or ())
        if missing:
            raise MalformedTraceError(f"{trace_path}: missing columns {sorted(missing)}")
        for line, rec in enumerate(reader, start=2):
            step = _opt_int(rec["step"], "step", line)
            if step is None:
                raise MalformedTraceError(f"line {line}: empty step")
            quotes = [_opt_int(rec[c], c, line) for c in ("best_bid", "best_ask", "passive_price")]
            fills = []
            for item in filter(None, (rec["fills"] or "").split(";")):
                price, _, qty = item.partition(":")
                fills.append((_opt_int(price, "fill price", line), _opt_int(qty, "fill qty", line)))
            if not fills:
                rows.append((step, *quotes, None, None))
            for price, qty in fills:
                rows.append((step, *quotes, price, qty))
    return rows


def replay(trace_path: str | Path, out_path: str | Path) -> list[tuple]:
    rows = replay_rows(trace_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPLAY_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return rows


# -- manifest -------------------------------------------------------------------
def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, out: Path, command: str) -> dict:
    artifacts = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != MANIFEST_FILE and not p.name.endswith(".tmp")
    }
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": cfg.source_sha256,
        "seeds": list(cfg.seeds),
        "artifacts": artifacts,
        "note": PROXY_NOTE,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def fraction_finite(reports: list[EpisodeReport]) -> bool:
    return all(math.isfinite(r.slippage_per_share) for r in reports)
