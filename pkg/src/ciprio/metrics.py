"""Ranking-quality metrics and the per-cycle metric selection rule.

All functions are pure. Ranks are 1-based throughout: rank 1 is the test
executed first.
"""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import CiCycle, RankedSequence, optimal_ranking


@dataclass(frozen=True)
class CycleMetrics:
    """One cycle's score under the applicable metric."""

    cycle_id: int
    metric_kind: str  # "APFD" or "NRPA"
    value: float
    n_tests: int
    n_failures: int

    def __post_init__(self):
        if self.metric_kind not in ("APFD", "NRPA"):
            raise ValueError(f"unknown metric kind {self.metric_kind!r}")
        if self.metric_kind == "APFD" and self.n_failures < 1:
            raise ValueError("APFD requires at least one failure")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")


def _check_same_ids(s: RankedSequence, s_o: RankedSequence) -> int:
    if set(s.test_ids) != set(s_o.test_ids):
        raise ValueError("sequences rank different test id sets")
    k = len(s)
    if k < 1:
        raise ValueError("sequences must be nonempty")
    return k


def rpa(s: RankedSequence, s_o: RankedSequence) -> float:
    """Rank percentile average of ``s`` against the reference order ``s_o``.

    Each item contributes the product of its top-weighted positions in both
    sequences, (k - idx(s, m) + 1) * (k - idx(s_o, m) + 1), normalized by
    k^2 (k + 1) / 2. Higher means ``s`` preserves more of the reference.
    """
    k = _check_same_ids(s, s_o)
    total = sum(
        (k - s.idx(m) + 1) * (k - s_o.idx(m) + 1) for m in s.test_ids
    )
    return total / (k * k * (k + 1) / 2)


def nrpa(s: RankedSequence, s_o: RankedSequence) -> float:
    """Normalized RPA: rpa(s) / rpa(s_o), equal to 1 iff weight-optimal."""
    return rpa(s, s_o) / rpa(s_o, s_o)


def apfd(s: RankedSequence, verdicts: dict[str, int]) -> float:
    """Average percentage of faults detected by executing tests in order ``s``.

    Each failing test counts as one fault. Undefined when nothing fails;
    callers fall back to NRPA in that case.
    """
    if set(verdicts) != set(s.test_ids):
        raise ValueError("verdicts do not cover the ranked test ids")
    n = len(s)
    m = sum(verdicts.values())
    if m < 1:
        raise ValueError("APFD undefined: no failing test case in the cycle")
    rank_sum = sum(s.idx(t) * v for t, v in verdicts.items())
    return 1.0 - rank_sum / (n * m) + 1.0 / (2 * n)


def metric_for_cycle(s: RankedSequence, cycle: CiCycle) -> CycleMetrics:
    """Score a ranking with APFD when the cycle has failures, NRPA otherwise."""
    verdicts = {r.test_id: r.verdict for r in cycle.records}
    n_failures = sum(verdicts.values())
    if n_failures >= 1:
        kind, value = "APFD", apfd(s, verdicts)
    else:
        kind, value = "NRPA", nrpa(s, optimal_ranking(cycle))
    return CycleMetrics(
        cycle_id=cycle.cycle_id,
        metric_kind=kind,
        value=value,
        n_tests=cycle.size,
        n_failures=n_failures,
    )


def cle(a: list[float], b: list[float]) -> float:
    """Common language effect size: P(sample from a > sample from b).

    Ties count one half, the usual convention.
    """
    if not a or not b:
        raise ValueError("effect size needs two nonempty samples")
    wins = sum(1.0 for x in a for y in b if x > y)
    ties = sum(1.0 for x in a for y in b if x == y)
    return (wins + 0.5 * ties) / (len(a) * len(b))
