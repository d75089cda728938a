"""CI execution-history datasets: loading, synthesis, features, and the
reference ranking.

A dataset is an ordered sequence of CI cycles; each cycle holds one record per
test case with its verdict, timing, and derived history features. The feature
derivation is strictly backward-looking: a record at cycle i only encodes
information from cycles before i, plus the current verdict/duration kept as
ground truth for rewards and metrics.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_HISTORY_LEN = 4

CANONICAL_COLUMNS = ("cycle_id", "test_id", "verdict", "duration")


class DatasetError(Exception):
    """Base error for dataset loading and validation."""


class LoadError(DatasetError):
    """A CSV row could not be parsed; the message names the offending line."""


class ValidationError(DatasetError):
    """Parsed data violates a dataset invariant."""


class NoEvaluableCyclesError(DatasetError):
    """Filtering removed every cycle; nothing is left to evaluate."""


@dataclass(frozen=True)
class TestCaseRecord:
    """One test case's feature record at one cycle.

    ``exec_time`` is the mean of the test's durations over *previous* cycles
    (0.0 on first appearance); ``duration`` is the current cycle's measured
    time, kept only as ground truth. ``history`` holds the last H verdicts,
    most recent first, zero-padded where the test did not run.
    """

    test_id: str
    verdict: int
    exec_time: float
    duration: float
    history: tuple[int, ...]
    age: int
    code_features: tuple[float, ...] = ()

    def __post_init__(self):
        if self.verdict not in (0, 1):
            raise ValidationError(f"verdict must be 0 or 1, got {self.verdict!r}")
        if self.exec_time < 0 or self.duration < 0:
            raise ValidationError(f"negative time for test {self.test_id!r}")
        if self.age < 0:
            raise ValidationError(f"negative age for test {self.test_id!r}")
        if any(v not in (0, 1) for v in self.history):
            raise ValidationError(f"history of {self.test_id!r} must be binary")


@dataclass(frozen=True)
class CiCycle:
    """A single CI cycle: a set of test records plus the cycle-failed flag."""

    cycle_id: int
    records: tuple[TestCaseRecord, ...]
    failed: bool

    def __post_init__(self):
        if not self.records:
            raise ValidationError(f"cycle {self.cycle_id} has no records")
        ids = [r.test_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(
                f"duplicate test_id in cycle {self.cycle_id}: {', '.join(dup)}"
            )
        has_failure = any(r.verdict == 1 for r in self.records)
        if self.failed != has_failure:
            raise ValidationError(
                f"cycle {self.cycle_id}: failed flag {self.failed} inconsistent "
                f"with verdicts"
            )

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def n_failures(self) -> int:
        return sum(r.verdict for r in self.records)


@dataclass(frozen=True)
class Dataset:
    """An ordered list of cycles plus the descriptors agents need."""

    name: str
    kind: str  # "simple" or "enriched"
    cycles: tuple[CiCycle, ...]
    feature_dim: int
    max_tests: int
    history_len: int = DEFAULT_HISTORY_LEN
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [c.cycle_id for c in self.cycles]
        if ids != sorted(ids) or len(set(ids)) != len(ids):
            raise ValidationError("cycles must be strictly ordered by cycle_id")
        if self.cycles:
            observed = max(c.size for c in self.cycles)
            if observed != self.max_tests:
                raise ValidationError(
                    f"max_tests={self.max_tests} but largest cycle has {observed}"
                )

    @property
    def n_cycles(self) -> int:
        return len(self.cycles)


@dataclass(frozen=True)
class RankedSequence:
    """An execution order over a cycle's test ids; rank 1 runs first."""

    test_ids: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.test_ids)) != len(self.test_ids):
            raise ValidationError("ranked sequence contains duplicate test ids")
        object.__setattr__(
            self, "_pos", {t: i + 1 for i, t in enumerate(self.test_ids)}
        )

    def idx(self, test_id: str) -> int:
        """1-based rank of ``test_id``; rank 1 is the highest priority."""
        try:
            return self._pos[test_id]
        except KeyError:
            raise KeyError(f"test {test_id!r} not in sequence") from None

    def __len__(self) -> int:
        return len(self.test_ids)

    def __iter__(self):
        return iter(self.test_ids)


def priority_key(record: TestCaseRecord) -> tuple:
    """Total-order sort key realizing the reference ranking.

    Failing tests come first, then ascending mean execution time, then
    test_id as the deterministic tie-break.
    """
    return (-record.verdict, record.exec_time, record.test_id)


def optimal_ranking(cycle: CiCycle) -> RankedSequence:
    """Reference order: failures first, faster tests first within a verdict."""
    ordered = sorted(cycle.records, key=priority_key)
    return RankedSequence(tuple(r.test_id for r in ordered))


def build_observation(record: TestCaseRecord) -> np.ndarray:
    """Feature vector [exec_time, age, history..., code_features...].

    The current verdict is the label and is never part of the observation.
    """
    return np.array(
        [record.exec_time, float(record.age), *record.history, *record.code_features],
        dtype=np.float64,
    )


def padding_observation(feature_dim: int) -> np.ndarray:
    """All-(-1) feature row standing in for a dummy/padded test case."""
    return np.full(feature_dim, -1.0, dtype=np.float64)


def filter_cycles(ds: Dataset, min_size: int = 6) -> Dataset:
    """Drop cycles with fewer than ``min_size`` tests, keeping the order."""
    if min_size < 1:
        raise ValueError(f"min_size must be >= 1, got {min_size}")
    kept = tuple(c for c in ds.cycles if c.size >= min_size)
    if not kept:
        raise NoEvaluableCyclesError(
            f"no evaluable cycles: every cycle of {ds.name!r} has fewer than "
            f"{min_size} test cases"
        )
    if len(kept) == len(ds.cycles):
        return ds
    return replace(ds, cycles=kept, max_tests=max(c.size for c in kept))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _RawRow:
    line: int
    cycle_id: int
    test_id: str
    verdict: int
    duration: float
    features: tuple[float, ...]


def _parse_row(line_no: int, row: dict, columns: dict, feature_cols: list[str]) -> _RawRow:
    def fail(msg):
        raise LoadError(f"row {line_no}: {msg}")

    raw = {}
    for canonical in CANONICAL_COLUMNS:
        value = row.get(columns[canonical])
        if value is None or value == "":
            fail(f"missing value for column {columns[canonical]!r}")
        raw[canonical] = value

    try:
        cycle_id = int(raw["cycle_id"])
    except ValueError:
        fail(f"cycle_id {raw['cycle_id']!r} is not an integer")
    if cycle_id < 1:
        fail(f"cycle_id must be positive, got {cycle_id}")

    if raw["verdict"] not in ("0", "1"):
        fail(f"verdict {raw['verdict']!r} is not 0 or 1")

    try:
        duration = float(raw["duration"])
    except ValueError:
        fail(f"duration {raw['duration']!r} is not a number")
    if duration < 0:
        fail(f"duration must be nonnegative, got {duration}")

    features = []
    for col in feature_cols:
        value = row.get(col)
        if value is None or value == "":
            fail(f"missing value for feature column {col!r}")
        try:
            features.append(float(value))
        except ValueError:
            fail(f"feature {col!r} value {value!r} is not a number")

    return _RawRow(
        line=line_no,
        cycle_id=cycle_id,
        test_id=raw["test_id"],
        verdict=int(raw["verdict"]),
        duration=duration,
        features=tuple(features),
    )


def _derive_dataset(
    name: str,
    rows: list[_RawRow],
    history_len: int,
    metadata: dict | None = None,
) -> Dataset:
    """Group raw rows into cycles and derive all backward-looking features."""
    if not rows:
        raise ValidationError(f"dataset {name!r} contains no rows")

    seen: set[tuple[int, str]] = set()
    for r in rows:
        key = (r.cycle_id, r.test_id)
        if key in seen:
            raise ValidationError(
                f"duplicate (cycle_id, test_id) = ({r.cycle_id}, {r.test_id!r})"
            )
        seen.add(key)

    by_cycle: dict[int, list[_RawRow]] = {}
    for r in rows:
        by_cycle.setdefault(r.cycle_id, []).append(r)
    cycle_ids = sorted(by_cycle)
    cycle_pos = {cid: i for i, cid in enumerate(cycle_ids)}

    # Per-test state, keyed by test_id: first cycle position, past durations,
    # and verdict per cycle position (for history windows).
    first_pos: dict[str, int] = {}
    duration_sums: dict[str, tuple[float, int]] = {}
    verdict_at: dict[str, dict[int, int]] = {}

    cycles: list[CiCycle] = []
    for cid in cycle_ids:
        pos = cycle_pos[cid]
        records = []
        for r in sorted(by_cycle[cid], key=lambda r: r.test_id):
            if r.test_id not in first_pos:
                first_pos[r.test_id] = pos
            total, count = duration_sums.get(r.test_id, (0.0, 0))
            exec_time = total / count if count else 0.0
            history = tuple(
                verdict_at.get(r.test_id, {}).get(pos - 1 - j, 0)
                for j in range(history_len)
            )
            records.append(
                TestCaseRecord(
                    test_id=r.test_id,
                    verdict=r.verdict,
                    exec_time=exec_time,
                    duration=r.duration,
                    history=history,
                    age=pos - first_pos[r.test_id],
                    code_features=r.features,
                )
            )
        for r in by_cycle[cid]:
            total, count = duration_sums.get(r.test_id, (0.0, 0))
            duration_sums[r.test_id] = (total + r.duration, count + 1)
            verdict_at.setdefault(r.test_id, {})[pos] = r.verdict
        failed = any(rec.verdict == 1 for rec in records)
        cycles.append(CiCycle(cycle_id=cid, records=tuple(records), failed=failed))

    n_features = len(rows[0].features)
    if any(len(r.features) != n_features for r in rows):
        raise ValidationError("inconsistent code-feature dimension across rows")

    return Dataset(
        name=name,
        kind="enriched" if n_features else "simple",
        cycles=tuple(cycles),
        feature_dim=2 + history_len + n_features,
        max_tests=max(c.size for c in cycles),
        history_len=history_len,
        metadata=dict(metadata or {}),
    )


def load_dataset(
    path: str | Path,
    schema: dict | None = None,
    history_len: int = DEFAULT_HISTORY_LEN,
) -> Dataset:
    """Load a dataset from a flat CSV of per-execution log rows.

    ``schema`` optionally maps the canonical column names (cycle_id, test_id,
    verdict, duration) to the file's header names and may carry a "features"
    list naming the code-feature columns in order. Without a schema, feature
    columns are those matching f1..fK in header order.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"dataset file not found: {path}")
    schema = dict(schema or {})
    columns = {c: schema.get(c, c) for c in CANONICAL_COLUMNS}

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canonical, col in columns.items():
            if col not in header:
                raise LoadError(
                    f"missing column {col!r} (mapped from {canonical!r}) in {path.name}"
                )
        if "features" in schema:
            feature_cols = list(schema["features"])
            for col in feature_cols:
                if col not in header:
                    raise LoadError(f"missing feature column {col!r} in {path.name}")
        else:
            feature_cols = [c for c in header if re.fullmatch(r"f\d+", c)]

        rows = [
            _parse_row(line_no, row, columns, feature_cols)
            for line_no, row in enumerate(reader, start=2)
        ]

    return _derive_dataset(path.stem, rows, history_len)


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    """Write a dataset back out as the canonical flat CSV."""
    n_features = ds.feature_dim - 2 - ds.history_len
    header = ["cycle_id", "test_id", "verdict", "duration"]
    header += [f"f{i + 1}" for i in range(n_features)]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cycle in ds.cycles:
            for r in cycle.records:
                writer.writerow(
                    [cycle.cycle_id, r.test_id, r.verdict, repr(r.duration)]
                    + [repr(v) for v in r.code_features]
                )


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

_FAIL_RULE_RE = re.compile(r"f(\d+)>([0-9.]+)")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters for the synthetic CI-history generator.

    ``fail_rule`` is either "never" or "fN>x": fail when code feature N
    (1-based) exceeds x. ``noise`` is the per-cycle probability that one
    uniformly chosen test's verdict is flipped after the rule is applied.
    """

    cycles: int = 50
    tests_per_cycle: int = 20
    feature_dim: int = 4
    fail_rule: str = "f1>0.9"
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError(f"cycles must be >= 1, got {self.cycles}")
        if self.tests_per_cycle < 1:
            raise ValueError(f"tests_per_cycle must be >= 1, got {self.tests_per_cycle}")
        if self.feature_dim < 0:
            raise ValueError(f"feature_dim must be >= 0, got {self.feature_dim}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")
        self.parse_rule()

    def parse_rule(self) -> tuple[int, float] | None:
        """Return (0-based feature index, threshold), or None for "never"."""
        if self.fail_rule == "never":
            return None
        m = _FAIL_RULE_RE.fullmatch(self.fail_rule)
        if not m:
            raise ValueError(
                f"unsupported fail_rule {self.fail_rule!r}; expected 'never' or 'fN>x'"
            )
        index = int(m.group(1)) - 1
        if not 0 <= index < self.feature_dim:
            raise ValueError(
                f"fail_rule references f{index + 1} but feature_dim={self.feature_dim}"
            )
        return index, float(m.group(2))


GENERATOR_KEYS = {
    "cycles": int,
    "tests_per_cycle": int,
    "feature_dim": int,
    "fail_rule": str,
    "noise": float,
    "seed": int,
}


def parse_generator_config(path: str | Path) -> GeneratorSpec:
    """Parse a key = value config file into a GeneratorSpec."""
    path = Path(path)
    values: dict = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path.name}:{line_no}: expected 'key = value'")
        key, _, value = (p.strip() for p in line.partition("="))
        if key not in GENERATOR_KEYS:
            known = ", ".join(sorted(GENERATOR_KEYS))
            raise ValueError(f"{path.name}:{line_no}: unknown key {key!r} (known: {known})")
        try:
            values[key] = GENERATOR_KEYS[key](value)
        except ValueError:
            raise ValueError(
                f"{path.name}:{line_no}: invalid {key} value {value!r}"
            ) from None
    return GeneratorSpec(**values)


def synthesize_dataset(
    spec: GeneratorSpec,
    seed: int | None = None,
    name: str = "synthetic",
    history_len: int = DEFAULT_HISTORY_LEN,
) -> Dataset:
    """Generate a deterministic dataset from the generator spec.

    Test durations are stable per test across cycles, so the running-mean
    exec_time feature converges to the true time from the second appearance.
    The failure rule and all generator parameters are recorded in the
    dataset metadata.
    """
    if seed is None:
        seed = spec.seed
    rng = np.random.default_rng(seed)
    rule = spec.parse_rule()

    test_ids = [f"t{i + 1:03d}" for i in range(spec.tests_per_cycle)]
    base_duration = {
        t: round(float(rng.uniform(0.5, 9.5)), 2) for t in test_ids
    }

    rows: list[_RawRow] = []
    for cid in range(1, spec.cycles + 1):
        verdicts = {}
        features = {}
        for t in test_ids:
            feats = tuple(round(float(v), 6) for v in rng.uniform(0.0, 1.0, spec.feature_dim))
            features[t] = feats
            verdicts[t] = int(rule is not None and feats[rule[0]] > rule[1])
        if spec.noise > 0 and rng.random() < spec.noise:
            flipped = test_ids[rng.integers(len(test_ids))]
            verdicts[flipped] = 1 - verdicts[flipped]
        for t in test_ids:
            rows.append(
                _RawRow(
                    line=0,
                    cycle_id=cid,
                    test_id=t,
                    verdict=verdicts[t],
                    duration=base_duration[t],
                    features=features[t],
                )
            )

    metadata = {
        "generator": {
            "cycles": spec.cycles,
            "tests_per_cycle": spec.tests_per_cycle,
            "feature_dim": spec.feature_dim,
            "fail_rule": spec.fail_rule,
            "noise": spec.noise,
            "seed": seed,
        }
    }
    return _derive_dataset(name, rows, history_len, metadata)
