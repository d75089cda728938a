"""Episodic environments that replay one CI cycle per episode.

Each environment turns one prioritization formulation into an agent loop:

* listwise: pick the next test out of a padded feature matrix, one rank at
  a time;
* pointwise: emit a continuous score in (0, 1] per test, low score = run
  first;
* pairwise: answer "which of these two runs first", driving either a
  selection sort or a bottom-up merge sort over the cycle.

In train mode rewards are computed from the cycle's logged verdicts and
times. In predict mode rewards are fixed at 0.0 and verdicts are never
read, so observations and rankings cannot leak the current cycle's outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import (
    CiCycle,
    RankedSequence,
    TestCaseRecord,
    build_observation,
    optimal_ranking,
    padding_observation,
)


class EnvError(Exception):
    """Environment misuse: stepping after done, oversized cycles, bad modes."""


@dataclass(frozen=True)
class ActionSpace:
    """What the agent may emit: discrete(n), binary, or a real in (0, 1]."""

    kind: str  # "discrete", "binary", "continuous_unit"
    n: int = 0

    def __post_init__(self):
        if self.kind not in ("discrete", "binary", "continuous_unit"):
            raise ValueError(f"unknown action space kind {self.kind!r}")
        if self.kind == "discrete" and self.n < 1:
            raise ValueError("discrete action space needs n >= 1")

    @property
    def n_actions(self) -> int:
        if self.kind == "discrete":
            return self.n
        if self.kind == "binary":
            return 2
        raise ValueError("continuous space has no action count")


@dataclass(frozen=True)
class StepResult:
    done: bool
    reward: float
    obs: np.ndarray


@dataclass(frozen=True)
class EpisodeOutcome:
    """What one completed episode produced."""

    ranking: RankedSequence
    steps: int
    episode_reward: float


def listwise_reward(action: int, optimal_rank: int, n: int) -> float:
    """1 minus squared normalized distance between assigned and optimal rank.

    Positions are 0-based; norm(x) = x / (n - 1) maps the extremes to 0 and 1
    (degenerate n = 1 normalizes to 0).
    """
    if n <= 1:
        return 1.0
    d = (optimal_rank - action) / (n - 1)
    return 1.0 - d * d


def pointwise_reward(action: float, optimal_rank: int, n: int) -> float:
    """1 minus squared distance between the score and the normalized rank."""
    norm = 0.0 if n <= 1 else optimal_rank / (n - 1)
    d = norm - action
    return 1.0 - d * d


def pairwise_reward(action: int, pair: tuple[TestCaseRecord, TestCaseRecord]) -> float:
    """Reward for declaring pair[action] the higher-priority test.

    Preferring the failing test earns 1, preferring the passing one earns 0;
    with equal verdicts, preferring the not-slower test earns 0.5.
    """
    selected, other = pair[action], pair[1 - action]
    if selected.verdict > other.verdict:
        return 1.0
    if selected.verdict < other.verdict:
        return 0.0
    return 0.5 if selected.exec_time <= other.exec_time else 0.0


class _ReplayEnv:
    """Shared plumbing: mode handling, RNG, per-step trace, reward gating."""

    def __init__(self, cycle: CiCycle, mode: str = "train", rng=None, trace=None):
        if mode not in ("train", "predict"):
            raise EnvError(f"mode must be 'train' or 'predict', got {mode!r}")
        if not cycle.records:
            raise EnvError("cannot replay an empty cycle")
        self.cycle = cycle
        self.mode = mode
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.trace = trace
        self.done = False
        self.steps = 0
        self.episode_reward = 0.0
        self._episode = 0
        # The reference order is only consulted for train-mode rewards.
        self._optimal_pos: dict[str, int] | None = None
        if mode == "train":
            s_o = optimal_ranking(cycle)
            self._optimal_pos = {t: i for i, t in enumerate(s_o.test_ids)}

    @property
    def k(self) -> int:
        return self.cycle.size

    def _begin_episode(self):
        self._episode += 1
        self.done = False
        self.steps = 0
        self.episode_reward = 0.0

    def _record_step(self, action, reward: float):
        self.steps += 1
        self.episode_reward += reward
        if self.trace is not None:
            self.trace.writerow([self._episode, self.steps, action, reward])

    def _require_live(self):
        if self.done:
            raise EnvError("step() called after episode end")

    def outcome(self) -> EpisodeOutcome:
        if not self.done:
            raise EnvError("episode still running")
        return EpisodeOutcome(
            ranking=self.ranking(), steps=self.steps, episode_reward=self.episode_reward
        )

    def ranking(self) -> RankedSequence:
        raise NotImplementedError


class ListwiseEnv(_ReplayEnv):
    """One placement per step over a fixed-size padded feature matrix.

    The observation is the row-major flattening of a (max_tests, feature_dim)
    matrix whose unused rows are dummy rows of -1. Selecting a dummy row is
    legal, earns 0 reward, and leaves the matrix unchanged. When only one
    real test remains the episode ends and that test is appended implicitly,
    with the reward still computed for whatever the final action selected.

    Training episodes are capped at ``step_cap`` times max_tests placements
    as a guard against policies that select dummies forever; the cap is far
    beyond any well-formed episode length.
    """

    step_cap = 50

    def __init__(self, cycle, mode="train", rng=None, max_tests: int | None = None, trace=None):
        super().__init__(cycle, mode, rng, trace)
        self.max_tests = max_tests if max_tests is not None else cycle.size
        if cycle.size > self.max_tests:
            raise EnvError(
                f"cycle {cycle.cycle_id} has {cycle.size} tests, "
                f"exceeding max_tests={self.max_tests}"
            )
        self.feature_dim = build_observation(cycle.records[0]).shape[0]
        self.action_space = ActionSpace("discrete", self.max_tests)
        self.observation_dim = self.max_tests * self.feature_dim

    def reset(self) -> np.ndarray:
        self._begin_episode()
        order = self.rng.permutation(self.k)
        self._slots: list[TestCaseRecord | None] = [
            self.cycle.records[i] for i in order
        ] + [None] * (self.max_tests - self.k)
        self._rows = np.stack(
            [
                build_observation(r) if r is not None else padding_observation(self.feature_dim)
                for r in self._slots
            ]
        )
        self._placed: list[str] = []
        self._rank = 0
        if self.k == 1:
            # Single test: nothing to order, but the episode still takes the
            # terminal step below on the first action.
            pass
        return self._obs()

    def _obs(self) -> np.ndarray:
        return self._rows.reshape(-1).copy()

    def valid_actions(self) -> np.ndarray:
        """Mask of rows that still hold a real, unplaced test."""
        return np.array([slot is not None for slot in self._slots], dtype=bool)

    def step(self, action: int) -> StepResult:
        self._require_live()
        action = int(action)
        if not 0 <= action < self.max_tests:
            raise EnvError(f"action {action} outside [0, {self.max_tests})")
        selected = self._slots[action]

        reward = 0.0
        if self.mode == "train" and selected is not None:
            reward = listwise_reward(
                self._rank, self._optimal_pos[selected.test_id], self.max_tests
            )

        if self._rank == self.k - 1:
            self.done = True
            remaining = [s.test_id for s in self._slots if s is not None]
            self._placed.extend(remaining)
        elif selected is not None:
            self._placed.append(selected.test_id)
            self._slots[action] = None
            self._rows[action] = padding_observation(self.feature_dim)
            self._rank += 1

        self._record_step(action, reward)
        if not self.done and self.steps >= self.step_cap * self.max_tests:
            self.done = True
            self._placed.extend(s.test_id for s in self._slots if s is not None)
        return StepResult(self.done, reward, self._obs())

    def ranking(self) -> RankedSequence:
        return RankedSequence(tuple(self._placed))


class PointwiseEnv(_ReplayEnv):
    """Score one test per step; final order is ascending by score.

    The reward trains scores toward the normalized optimal rank, where 0 is
    the highest priority, so low scores sort first. Out-of-range actions are
    clamped into (0, 1] and counted in ``clamped_steps``.
    """

    def __init__(self, cycle, mode="train", rng=None, trace=None):
        super().__init__(cycle, mode, rng, trace)
        self.feature_dim = build_observation(cycle.records[0]).shape[0]
        self.action_space = ActionSpace("continuous_unit")
        self.observation_dim = self.feature_dim
        self.clamped_steps = 0

    def reset(self) -> np.ndarray:
        self._begin_episode()
        order = self.rng.permutation(self.k)
        self._seq = [self.cycle.records[i] for i in order]
        self._index = 0
        self._scores: list[float] = []
        return build_observation(self._seq[0])

    def step(self, action: float) -> StepResult:
        self._require_live()
        score = float(action)
        clamped = min(1.0, max(score, 1e-12))
        if clamped != score:
            self.clamped_steps += 1

        reward = 0.0
        if self.mode == "train":
            current = self._seq[self._index]
            reward = pointwise_reward(
                clamped, self._optimal_pos[current.test_id], self.k
            )

        self._scores.append(clamped)
        if self._index < self.k - 1:
            self._index += 1
        else:
            self.done = True
        self._record_step(clamped, reward)
        return StepResult(self.done, reward, build_observation(self._seq[self._index]))

    def ranking(self) -> RankedSequence:
        ordered = sorted(
            zip(self._scores, (r.test_id for r in self._seq)),
            key=lambda pair: (pair[0], pair[1]),
        )
        return RankedSequence(tuple(t for _, t in ordered))


class _PairwiseEnv(_ReplayEnv):
    """Common pairwise machinery: pair observations and the 0/1 action."""

    def __init__(self, cycle, mode="train", rng=None, trace=None):
        super().__init__(cycle, mode, rng, trace)
        self.feature_dim = build_observation(cycle.records[0]).shape[0]
        self.action_space = ActionSpace("binary")
        self.observation_dim = 2 * self.feature_dim

    def _pair_obs(self, a: TestCaseRecord, b: TestCaseRecord) -> np.ndarray:
        return np.concatenate([build_observation(a), build_observation(b)])

    def _reward(self, action: int, pair) -> float:
        if self.mode != "train":
            return 0.0
        return pairwise_reward(action, pair)

    @staticmethod
    def _check_action(action) -> int:
        action = int(action)
        if action not in (0, 1):
            raise EnvError(f"pairwise action must be 0 or 1, got {action}")
        return action


class PairwiseSelectionEnv(_PairwiseEnv):
    """Selection sort driven by agent comparisons.

    The observed pair is (s[idx0], s[idx1]); action 1 swaps them, keeping the
    best-so-far test at idx0. An episode over k tests takes exactly
    k (k - 1) / 2 steps.
    """

    def reset(self) -> np.ndarray:
        self._begin_episode()
        order = self.rng.permutation(self.k)
        self._seq = [self.cycle.records[i] for i in order]
        self._idx0, self._idx1 = 0, 1
        if self.k < 2:
            self.done = True
            return build_observation(self._seq[0])
        return self._pair_obs(self._seq[self._idx0], self._seq[self._idx1])

    def step(self, action: int) -> StepResult:
        self._require_live()
        action = self._check_action(action)
        pair = (self._seq[self._idx0], self._seq[self._idx1])
        reward = self._reward(action, pair)

        if action == 1:
            self._seq[self._idx0], self._seq[self._idx1] = pair[1], pair[0]
        if self._idx1 < self.k - 1:
            self._idx1 += 1
        elif self._idx0 < self.k - 2:
            self._idx0 += 1
            self._idx1 = self._idx0 + 1
        else:
            self.done = True

        self._record_step(action, reward)
        obs = self._pair_obs(self._seq[self._idx0], self._seq[self._idx1])
        return StepResult(self.done, reward, obs)

    def ranking(self) -> RankedSequence:
        return RankedSequence(tuple(r.test_id for r in self._seq))


class PairwiseMergeEnv(_PairwiseEnv):
    """Bottom-up merge sort driven by agent comparisons.

    Each step answers one merge comparison: action 0 takes the first element
    of the observed pair, action 1 the second. Runs are merged in a fixed
    deterministic order, so an episode needs at most k * ceil(log2 k)
    comparisons; exhausted runs are copied without consulting the agent.
    """

    def reset(self) -> np.ndarray:
        self._begin_episode()
        order = self.rng.permutation(self.k)
        self._src = [self.cycle.records[i] for i in order]
        self._dst: list[TestCaseRecord] = []
        self._width = 1
        self._lo = 0
        self._i = self._j = 0
        if self.k < 2:
            self.done = True
            return build_observation(self._src[0])
        self._open_block()
        return self._pair_obs(self._src[self._i], self._src[self._j])

    # Merge-state helpers. A "block" is one pair of adjacent runs
    # [lo, mid) and [mid, hi) of the current pass.

    def _open_block(self):
        """Position at the next comparison, finishing passes as needed."""
        k = self.k
        while True:
            if self._lo >= k:
                self._src = self._dst
                self._dst = []
                self._lo = 0
                self._width *= 2
                if self._width >= k:
                    self.done = True
                    return
            mid = min(self._lo + self._width, k)
            hi = min(self._lo + 2 * self._width, k)
            if mid >= hi:
                # Lone run with no partner: carry it through this pass.
                self._dst.extend(self._src[self._lo:hi])
                self._lo = hi
                continue
            self._i, self._j = self._lo, mid
            self._mid, self._hi = mid, hi
            return

    def _drain_and_advance(self):
        """After one take, copy any exhausted side and move to the next pair."""
        if self._i == self._mid:
            self._dst.extend(self._src[self._j:self._hi])
            self._j = self._hi
        elif self._j == self._hi:
            self._dst.extend(self._src[self._i:self._mid])
            self._i = self._mid
        if self._i == self._mid and self._j == self._hi:
            self._lo = self._hi
            self._open_block()

    def step(self, action: int) -> StepResult:
        self._require_live()
        action = self._check_action(action)
        pair = (self._src[self._i], self._src[self._j])
        reward = self._reward(action, pair)

        if action == 0:
            self._dst.append(self._src[self._i])
            self._i += 1
        else:
            self._dst.append(self._src[self._j])
            self._j += 1
        self._drain_and_advance()

        self._record_step(action, reward)
        if self.done:
            obs = self._pair_obs(self._src[0], self._src[min(1, self.k - 1)])
        else:
            obs = self._pair_obs(self._src[self._i], self._src[self._j])
        return StepResult(self.done, reward, obs)

    def ranking(self) -> RankedSequence:
        return RankedSequence(tuple(r.test_id for r in self._src))


RANKING_MODELS = ("pointwise", "pairwise_selection", "pairwise_merge", "listwise")


def make_env(
    ranking_model: str,
    cycle: CiCycle,
    mode: str = "train",
    rng=None,
    max_tests: int | None = None,
    trace=None,
):
    """Instantiate the environment for a ranking model over one cycle."""
    if ranking_model == "listwise":
        return ListwiseEnv(cycle, mode, rng, max_tests=max_tests, trace=trace)
    if ranking_model == "pointwise":
        return PointwiseEnv(cycle, mode, rng, trace=trace)
    if ranking_model == "pairwise_selection":
        return PairwiseSelectionEnv(cycle, mode, rng, trace=trace)
    if ranking_model == "pairwise_merge":
        return PairwiseMergeEnv(cycle, mode, rng, trace=trace)
    raise ValueError(
        f"unknown ranking model {ranking_model!r}; expected one of {RANKING_MODELS}"
    )
