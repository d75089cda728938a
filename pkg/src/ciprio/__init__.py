"""RL-based test case prioritization for continuous integration."""

from .dataset import (
    CiCycle,
    Dataset,
    GeneratorSpec,
    RankedSequence,
    TestCaseRecord,
    build_observation,
    filter_cycles,
    load_dataset,
    optimal_ranking,
    synthesize_dataset,
)
from .metrics import CycleMetrics, apfd, cle, metric_for_cycle, nrpa, rpa
from .orchestrator import (
    CycleResult,
    ExperimentConfig,
    persist_results,
    plateau_reached,
    rank_cycle,
    recent_failure_heuristic,
    run_experiment,
    training_budget,
)

__version__ = "0.1.0"

__all__ = [
    "CiCycle",
    "CycleMetrics",
    "CycleResult",
    "Dataset",
    "ExperimentConfig",
    "GeneratorSpec",
    "RankedSequence",
    "TestCaseRecord",
    "apfd",
    "build_observation",
    "cle",
    "filter_cycles",
    "load_dataset",
    "metric_for_cycle",
    "nrpa",
    "optimal_ranking",
    "persist_results",
    "plateau_reached",
    "rank_cycle",
    "recent_failure_heuristic",
    "rpa",
    "run_experiment",
    "synthesize_dataset",
    "training_budget",
]
