import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from exec_sim import rng as rngmod
from exec_sim.cerl import Exponential
from exec_sim.errors import ConfigError
from exec_sim.search import (
    COMPLETED,
    STOPPED,
    Categorical,
    Continuous,
    HalvingConfig,
    ParamSpace,
    resolve_workers,
    run_trial,
    sample_params,
    successive_halving,
    write_ledger_csv,
)

UNIT = ParamSpace((Continuous("x", 0.0, 1.0),))


def quadratic(params, seed):
    return -((params["x"] - 0.3) ** 2)


def noisy_quadratic(params, seed):
    return quadratic(params, seed) + 0.05 * rngmod.stream(seed).standard_normal()


def bernoulli(params, seed):
    return float(rngmod.stream(seed).random() < 0.5)


def flaky(params, seed):
    if params["x"] > 0.8:
        raise RuntimeError("diverged")
    return quadratic(params, seed)


class Interrupt(BaseException):
    pass


def interrupting(flag):
    def objective(params, seed):
        if flag["armed"] and flag["calls"] >= 16:
            raise Interrupt
        flag["calls"] += 1
        return noisy_quadratic(params, seed)

    return objective


# -- space and sampling ---------------------------------------------------------
@pytest.mark.parametrize(
    "make",
    [
        lambda: Continuous("x", 1.0, 1.0),
        lambda: Continuous("x", 0.0, float("inf")),
        lambda: Categorical("c", ()),
        lambda: ParamSpace(()),
        lambda: ParamSpace((Continuous("x", 0, 1), Categorical("x", (1,)))),
    ],
)
def test_invalid_space(make):
    with pytest.raises(ConfigError):
        make()


def test_sample_reproducible():
    a = sample_params(UNIT, 3, seed=11)
    assert a == sample_params(UNIT, 3, seed=11)
    assert all(0 < p["x"] < 1 for p in a)
    assert a != sample_params(UNIT, 3, seed=12)


def test_sample_prefix_stable():
    # point i depends only on (seed, i)
    assert sample_params(UNIT, 5, 2)[:3] == sample_params(UNIT, 3, 2)


def test_categorical_covers_values():
    space = ParamSpace((Categorical("c", ("a", "b")),))
    assert {p["c"] for p in sample_params(space, 64, 0)} == {"a", "b"}


def test_sample_needs_n():
    with pytest.raises(ValueError):
        sample_params(UNIT, 0, 0)


def test_continuous_uniform():
    xs = [p["x"] for p in sample_params(UNIT, 2000, 5)]
    assert stats.kstest(xs, "uniform").pvalue > 1e-3


# -- trials ---------------------------------------------------------------------
@given(st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_deterministic_trial_exact(x):
    assert run_trial(quadratic, {"x": x}, [0], 1) == -((x - 0.3) ** 2)


def test_duplicate_seeds_identical():
    assert run_trial(noisy_quadratic, {"x": 0.1}, [7]) == run_trial(noisy_quadratic, {"x": 0.1}, [7, 7])


def test_bernoulli_estimate():
    est = run_trial(bernoulli, {}, list(range(1000)))
    assert abs(est - 0.5) <= 0.05


def test_trial_with_utility_below_mean():
    seeds = list(range(200))
    mean = run_trial(noisy_quadratic, {"x": 0.3}, seeds)
    ce = run_trial(noisy_quadratic, {"x": 0.3}, seeds, utility=Exponential(2.0))
    assert ce < mean


def test_multi_episode_seeds_distinct():
    assert run_trial(bernoulli, {}, [3], episodes=400) != run_trial(bernoulli, {}, [3], episodes=1)


# -- halving --------------------------------------------------------------------
@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(n_initial=15, eta=4, rungs=3, episodes_per_rung=(1, 1, 1)), "search.n_initial"),
        (dict(n_initial=16, eta=1, rungs=3, episodes_per_rung=(1, 1, 1)), "search.eta"),
        (dict(n_initial=16, eta=4, rungs=3, episodes_per_rung=(1, 1)), "search.episodes_per_rung"),
        (dict(n_initial=16, eta=4, rungs=2, episodes_per_rung=(2, 1)), "search.episodes_per_rung"),
        (dict(n_initial=16, eta=4, rungs=0, episodes_per_rung=()), "search.rungs"),
    ],
)
def test_invalid_halving_config(kwargs, field):
    with pytest.raises(ConfigError) as err:
        HalvingConfig(**kwargs)
    assert err.value.field == field


def test_survivor_counts():
    cfg = HalvingConfig(16, 4, 3, (1, 2, 4))
    assert cfg.survivors() == [16, 4, 1]
    result = successive_halving(quadratic, UNIT, cfg, seed=0)
    per_rung = [sum(1 for r in result.ledger if r["rung"] == k) for k in range(3)]
    assert per_rung == [16, 4, 1]


@pytest.mark.parametrize("study_seed", range(20))
def test_halving_matches_exhaustive(study_seed):
    cfg = HalvingConfig(16, 4, 3, (1, 1, 1))
    result = successive_halving(quadratic, UNIT, cfg, seed=study_seed)
    points = sample_params(UNIT, 16, study_seed)
    values = [quadratic(p, 0) for p in points]
    assert result.best.index == int(np.argmax(values))
    assert result.best.params == points[int(np.argmax(values))]


def test_single_rung_is_random_search():
    cfg = HalvingConfig(10, 4, 1, (1,))
    result = successive_halving(quadratic, UNIT, cfg, seed=4)
    assert all(t.status == COMPLETED for t in result.trials)
    values = [quadratic(p, 0) for p in sample_params(UNIT, 10, 4)]
    assert result.best.index == int(np.argmax(values))


def test_status_and_budget():
    cfg = HalvingConfig(16, 4, 3, (2, 4, 8))
    result = successive_halving(noisy_quadratic, UNIT, cfg, seed=1)
    assert result.episodes_used <= cfg.budget()
    statuses = [t.status for t in result.trials]
    assert statuses.count(COMPLETED) == 1
    assert statuses.count(STOPPED) == 15
    assert result.best.episodes_run == 14


def test_ties_go_to_lower_index():
    space = ParamSpace((Categorical("c", ("a", "b")),))
    cfg = HalvingConfig(8, 2, 3, (1, 1, 1))
    result = successive_halving(lambda p, s: 1.0, space, cfg, seed=0)
    assert result.best.index == 0
    survivors = [r["trial_index"] for r in result.ledger if r["rung"] == 1]
    assert survivors == [0, 1, 2, 3]


def test_failed_trials_rank_last():
    cfg = HalvingConfig(16, 4, 2, (1, 1))
    result = successive_halving(flaky, UNIT, cfg, seed=3)
    failed = [t for t in result.trials if t.error]
    assert failed and all(t.status == STOPPED and "diverged" in t.error for t in failed)
    assert not result.best.error


def test_all_failed_raises():
    cfg = HalvingConfig(4, 2, 1, (1,))
    with pytest.raises(RuntimeError, match="failed"):
        successive_halving(lambda p, s: 1 / 0, UNIT, cfg, seed=0)


def test_winner_beats_stopped_at_shared_rung():
    cfg = HalvingConfig(16, 4, 3, (2, 4, 8))
    result = successive_halving(noisy_quadratic, UNIT, cfg, seed=6)
    best_by_rung = {r["rung"]: r for r in result.ledger if r["trial_index"] == result.best.index}
    for row in result.ledger:
        if row["status"] == STOPPED:
            assert best_by_rung[row["rung"]]["utility"] >= row["utility"]


def test_order_independence():
    cfg = HalvingConfig(16, 4, 3, (2, 2, 2))
    a = successive_halving(noisy_quadratic, UNIT, cfg, seed=9)
    b = successive_halving(noisy_quadratic, UNIT, cfg, seed=9, evaluation_order=lambda o: o[::-1])
    assert a.ledger == b.ledger


def test_parallel_matches_serial():
    cfg = HalvingConfig(16, 4, 3, (2, 2, 2))
    a = successive_halving(noisy_quadratic, UNIT, cfg, seed=9, workers=1)
    b = successive_halving(noisy_quadratic, UNIT, cfg, seed=9, workers=3)
    assert a.ledger == b.ledger


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("EXEC_SIM_WORKERS", "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.delenv("EXEC_SIM_WORKERS")
    assert resolve_workers() == 1
    with pytest.raises(ConfigError):
        resolve_workers(0)


def test_resume_after_interrupt(tmp_path):
    cfg = HalvingConfig(16, 4, 3, (1, 2, 4))
    full = successive_halving(noisy_quadratic, UNIT, cfg, seed=2)

    ckpt = tmp_path / "study.json"
    flag = {"armed": True, "calls": 0}
    with pytest.raises(Interrupt):
        successive_halving(interrupting(flag), UNIT, cfg, seed=2, checkpoint=ckpt)
    assert json.loads(ckpt.read_text())["completed_rung"] == 0

    flag["armed"] = False
    resumed = successive_halving(interrupting(flag), UNIT, cfg, seed=2, checkpoint=ckpt, resume=True)
    assert resumed.ledger == full.ledger
    assert resumed.best.index == full.best.index


def test_resume_rejects_other_study(tmp_path):
    cfg = HalvingConfig(4, 2, 2, (1, 1))
    ckpt = tmp_path / "s.json"
    successive_halving(quadratic, UNIT, cfg, seed=0, checkpoint=ckpt)
    with pytest.raises(ValueError, match="different study"):
        successive_halving(quadratic, UNIT, cfg, seed=1, checkpoint=ckpt, resume=True)


def test_ledger_csv(tmp_path):
    cfg = HalvingConfig(16, 4, 3, (1, 1, 1))
    result = successive_halving(quadratic, UNIT, cfg, seed=0)
    path = tmp_path / "ledger.csv"
    write_ledger_csv(result.ledger, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["trial_index", "rung", "param_x", "episodes", "utility", "status", "error"]
    assert len(rows) == 21
    assert float(rows[0]["utility"]) == result.ledger[0]["utility"]
