"""Per-cycle train/evaluate protocol, training budgets, and baselines.

An experiment walks a dataset in cycle order: the agent trains on the first
cycle, then for every later cycle it first produces a ranking with frozen
weights, the ranking is scored, and only then does the agent train on that
cycle's replayed logs. Rankings for cycle i therefore never see data from
cycles >= i.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import (
    ActorCriticAgent,
    ApproximatorConfig,
    DqnAgent,
    run_training_episode,
)
from .dataset import CiCycle, Dataset, RankedSequence, optimal_ranking
from .envs import RANKING_MODELS, make_env
from .metrics import CycleMetrics, metric_for_cycle

TRAINABLE_ALGORITHMS = ("dqn", "actor_critic")
BASELINE_ALGORITHMS = ("oracle", "random", "recent_failure")
ALGORITHMS = TRAINABLE_ALGORITHMS + BASELINE_ALGORITHMS

RESULTS_HEADER = (
    "cycle_id,ranking_model,algorithm,metric_kind,metric_value,"
    "n_tests,n_failures,training_steps,training_time_s,seed"
)


class ExperimentError(Exception):
    """Invalid experiment configuration or an unrunnable dataset."""


@dataclass(frozen=True)
class ExperimentConfig:
    """One (dataset, ranking model, algorithm, seed) run."""

    dataset: str
    ranking_model: str
    algorithm: str
    seed: int = 0
    budget_cap: int = 1_000_000
    episodes_factor: int = 200
    plateau_window: int = 100
    agent_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ranking_model not in RANKING_MODELS:
            raise ExperimentError(
                f"unknown ranking model {self.ranking_model!r}; "
                f"expected one of {RANKING_MODELS}"
            )
        if self.algorithm not in ALGORITHMS:
            raise ExperimentError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.algorithm == "dqn" and self.ranking_model == "pointwise":
            raise ExperimentError(
                "dqn supports discrete actions only; pointwise needs actor_critic"
            )
        if self.budget_cap < 0 or self.episodes_factor < 0 or self.plateau_window < 1:
            raise ExperimentError("budget, factor, and plateau window must be positive")


@dataclass(frozen=True)
class CycleResult:
    """Evaluation of one cycle plus the cost of the training that followed."""

    cycle_id: int
    metric: CycleMetrics
    training_steps: int
    training_time_s: float
    episodes: int = 0
    best_episode_reward: float = 0.0


def training_budget(n: int, factor: int = 200, cap: int = 1_000_000) -> int:
    """Step budget for one training instance: min(factor * n * log2 n, cap).

    A single test needs no ranking, so n = 1 gets a zero budget.
    """
    if n < 1:
        raise ValueError(f"cycle size must be >= 1, got {n}")
    if n == 1:
        return 0
    return min(math.floor(factor * n * math.log2(n)), cap)


def plateau_reached(episode_rewards, window: int = 100) -> bool:
    """True when the running max episode reward went stale for ``window`` episodes."""
    best = None
    last_improvement = 0
    for i, r in enumerate(episode_rewards):
        if best is None or r > best:
            best = r
            last_improvement = i
    if best is None:
        return False
    return len(episode_rewards) - 1 - last_improvement >= window


def recent_failure_heuristic(cycle: CiCycle) -> RankedSequence:
    """Rank by recency-weighted failure history, newest verdicts first.

    History slot j (0 = most recent) carries weight 2^(H-1-j); ties fall back
    to ascending exec_time, then test_id.
    """
    def score(record):
        h = len(record.history)
        return sum(v << (h - 1 - j) for j, v in enumerate(record.history))

    ordered = sorted(
        cycle.records, key=lambda r: (-score(r), r.exec_time, r.test_id)
    )
    return RankedSequence(tuple(r.test_id for r in ordered))


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _make_agent(config: ExperimentConfig, dataset: Dataset):
    params = dict(config.agent_params)
    feature_dim = dataset.feature_dim
    if config.ranking_model == "listwise":
        input_dim, n_actions = dataset.max_tests * feature_dim, dataset.max_tests
    elif config.ranking_model == "pointwise":
        input_dim, n_actions = feature_dim, 0
    else:
        input_dim, n_actions = 2 * feature_dim, 2

    if config.algorithm == "dqn":
        head = "q_values"
    elif config.ranking_model == "pointwise":
        head = "gaussian_scalar"
    else:
        head = "categorical"

    net = ApproximatorConfig(
        input_dim=input_dim,
        head=head,
        n_actions=n_actions,
        hidden_layers=tuple(params.pop("hidden_layers", (64, 64))),
        activation=params.pop("activation", "tanh"),
        learning_rate=params.pop("learning_rate", 1e-3),
    )
    seed = _stream(config.seed, 0)
    if config.algorithm == "dqn":
        return DqnAgent(net, seed=seed, **params)
    return ActorCriticAgent(net, seed=seed, **params)


def _train_on_cycle(agent, config: ExperimentConfig, cycle: CiCycle,
                    max_tests: int, rng) -> tuple[int, int, float]:
    """Replay one cycle's logs until the budget or a reward plateau.

    Returns (steps used, episodes run, best episode reward).
    """
    budget = training_budget(cycle.size, config.episodes_factor, config.budget_cap)
    agent.begin_training_instance(budget)
    env = make_env(config.ranking_model, cycle, "train", rng, max_tests=max_tests)
    steps = 0
    rewards: list[float] = []
    while steps < budget:
        outcome = run_training_episode(agent, env)
        steps += outcome.steps
        rewards.append(outcome.episode_reward)
        if plateau_reached(rewards, config.plateau_window):
            break
    return steps, len(rewards), max(rewards, default=0.0)


def _rank_with_agent(agent, config: ExperimentConfig, cycle: CiCycle,
                     max_tests: int, rng) -> RankedSequence:
    """Produce a ranking with frozen weights; no updates, no verdict access."""
    env = make_env(config.ranking_model, cycle, "predict", rng, max_tests=max_tests)
    obs = env.reset()
    masked = config.ranking_model == "listwise"
    while not env.done:
        mask = env.valid_actions() if masked else None
        obs = env.step(agent.predict(obs, explore=False, mask=mask)).obs
    return env.ranking()


def rank_cycle(config: ExperimentConfig, agent, cycle: CiCycle,
               max_tests: int, rng) -> RankedSequence:
    """Rank one cycle with the configured algorithm (agent or baseline)."""
    if config.algorithm == "oracle":
        return optimal_ranking(cycle)
    if config.algorithm == "random":
        ids = [r.test_id for r in cycle.records]
        return RankedSequence(tuple(ids[i] for i in rng.permutation(len(ids))))
    if config.algorithm == "recent_failure":
        return recent_failure_heuristic(cycle)
    return _rank_with_agent(agent, config, cycle, max_tests, rng)


def run_experiment(config: ExperimentConfig, dataset: Dataset, *,
                   timer=None, event_log: list | None = None) -> list[CycleResult]:
    """Run the incremental protocol over a dataset.

    The first cycle is train-only; each later cycle is ranked by the frozen
    agent, scored, and then used for offline training. ``timer`` is an
    optional monotonic clock (e.g. time.perf_counter) measured around the
    training loop only; without one, training_time_s is recorded as 0.0 so
    that results are byte-identical across reruns. ``event_log``, when given,
    receives ("predict"|"train", cycle_id, ...) tuples in execution order.
    """
    if dataset.n_cycles < 2:
        raise ExperimentError(
            f"dataset {dataset.name!r} has {dataset.n_cycles} cycles; "
            "need at least 2 (first cycle is train-only)"
        )
    trainable = config.algorithm in TRAINABLE_ALGORITHMS
    agent = _make_agent(config, dataset) if trainable else None
    max_tests = dataset.max_tests

    def log(*event):
        if event_log is not None:
            event_log.append(event)

    def train(pos: int, cycle: CiCycle) -> tuple[int, int, float, float]:
        if not trainable:
            return 0, 0, 0.0, 0.0
        start = timer() if timer is not None else 0.0
        steps, episodes, best = _train_on_cycle(
            agent, config, cycle, max_tests, _stream(config.seed, 1, pos)
        )
        elapsed = (timer() - start) if timer is not None else 0.0
        log("train", cycle.cycle_id, steps)
        return steps, episodes, best, elapsed

    train(0, dataset.cycles[0])

    results = []
    for pos, cycle in enumerate(dataset.cycles[1:], start=1):
        ranking = rank_cycle(
            config, agent, cycle, max_tests, _stream(config.seed, 2, pos)
        )
        log("predict", cycle.cycle_id, ranking.test_ids)
        metric = metric_for_cycle(ranking, cycle)
        steps, episodes, best, elapsed = train(pos, cycle)
        results.append(
            CycleResult(
                cycle_id=cycle.cycle_id,
                metric=metric,
                training_steps=steps,
                training_time_s=elapsed,
                episodes=episodes,
                best_episode_reward=best,
            )
        )
    return results


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def persist_results(results: list[CycleResult], path: str | Path,
                    config: ExperimentConfig) -> None:
    """Write per-cycle results as CSV; floats use repr for lossless reload."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER.split(","))
        for r in results:
            writer.writerow([
                r.cycle_id, config.ranking_model, config.algorithm,
                r.metric.metric_kind, repr(r.metric.value),
                r.metric.n_tests, r.metric.n_failures,
                r.training_steps, repr(r.training_time_s), config.seed,
            ])


def load_results(path: str | Path) -> list[dict]:
    """Read a results CSV back into typed row dicts."""
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({
                "cycle_id": int(row["cycle_id"]),
                "ranking_model": row["ranking_model"],
                "algorithm": row["algorithm"],
                "metric_kind": row["metric_kind"],
                "metric_value": float(row["metric_value"]),
                "n_tests": int(row["n_tests"]),
                "n_failures": int(row["n_failures"]),
                "training_steps": int(row["training_steps"]),
                "training_time_s": float(row["training_time_s"]),
                "seed": int(row["seed"]),
            })
    return rows


def summarize_results(config: ExperimentConfig, results: list[CycleResult]) -> dict:
    """Per-experiment mean/std cells, one per metric kind plus overall."""
    def cell(values):
        if not values:
            return {"mean": None, "std": None, "n": 0}
        arr = np.asarray(values)
        return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)}

    by_kind = {"APFD": [], "NRPA": []}
    for r in results:
        by_kind[r.metric.metric_kind].append(r.metric.value)
    return {
        "dataset": config.dataset,
        "ranking_model": config.ranking_model,
        "algorithm": config.algorithm,
        "seed": config.seed,
        "cycles_evaluated": len(results),
        "apfd": cell(by_kind["APFD"]),
        "nrpa": cell(by_kind["NRPA"]),
        "overall": cell([r.metric.value for r in results]),
        "training_steps_total": sum(r.training_steps for r in results),
        "training_time_s_total": sum(r.training_time_s for r in results),
    }
