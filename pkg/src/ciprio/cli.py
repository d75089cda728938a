"""Command-line surface: dataset ingestion and synthesis, experiment
execution, and report/plot emission.

Exit codes: 0 success, 1 validation error (bad flags, files, or config),
2 runtime failure. ``CIPRIO_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

from . import dataset as ds_mod
from .dataset import (
    Dataset,
    DatasetError,
    filter_cycles,
    load_dataset,
    parse_generator_config,
    synthesize_dataset,
    write_dataset_csv,
)
from .metrics import cle
from .orchestrator import (
    ExperimentConfig,
    ExperimentError,
    load_results,
    persist_results,
    run_experiment,
    summarize_results,
)

log = logging.getLogger("ciprio")

MANIFEST_KEYS = {
    "dataset", "ranking_model", "algorithm", "seed", "seeds",
    "budget_cap", "episodes_factor", "plateau_window", "agent_params",
    "history_len", "schema",
}


class CliValidationError(Exception):
    """Bad input that the user can fix; maps to exit code 1."""


@dataclass(frozen=True)
class RunManifest:
    """A resolved run configuration: which experiments, where to write."""

    config_path: Path
    entries: tuple[dict, ...]
    out_dir: Path
    timestamp: str


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def _dataset_summary(ds: Dataset) -> str:
    logs = sum(c.size for c in ds.cycles)
    failures = sum(c.n_failures for c in ds.cycles)
    return f"cycles={ds.n_cycles}, logs={logs}, fail_rate={failures / logs:.4f}"


# ---------------------------------------------------------------------------
# ingest / synth
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    schema = {}
    for mapping in args.map or []:
        if "=" not in mapping:
            raise CliValidationError(f"--map expects canonical=source, got {mapping!r}")
        canonical, _, source = mapping.partition("=")
        if canonical not in ds_mod.CANONICAL_COLUMNS:
            raise CliValidationError(
                f"--map key must be one of {ds_mod.CANONICAL_COLUMNS}, got {canonical!r}"
            )
        schema[canonical] = source
    if args.features:
        schema["features"] = [c.strip() for c in args.features.split(",") if c.strip()]
    ds = load_dataset(args.input, schema=schema or None, history_len=args.history_len)
    write_dataset_csv(ds, args.out)
    print(_dataset_summary(ds))
    return 0


def cmd_synth(args) -> int:
    spec = parse_generator_config(args.config)
    ds = synthesize_dataset(spec, seed=args.seed, name=Path(args.out).stem)
    write_dataset_csv(ds, args.out)
    print(_dataset_summary(ds))
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _load_manifest(config_path: Path, out_dir: Path) -> RunManifest:
    try:
        raw = json.loads(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliValidationError(f"manifest not found: {config_path}") from None
    except json.JSONDecodeError as exc:
        raise CliValidationError(f"manifest {config_path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or "experiments" not in raw:
        raise CliValidationError("manifest must be an object with an 'experiments' list")
    unknown_top = set(raw) - {"experiments"}
    if unknown_top:
        raise CliValidationError(f"unknown manifest key(s): {', '.join(sorted(unknown_top))}")

    entries = []
    for i, entry in enumerate(raw["experiments"]):
        if not isinstance(entry, dict):
            raise CliValidationError(f"experiments[{i}] must be an object")
        unknown = set(entry) - MANIFEST_KEYS
        if unknown:
            raise CliValidationError(
                f"experiments[{i}]: unknown key(s): {', '.join(sorted(unknown))}"
            )
        for required in ("dataset", "ranking_model", "algorithm"):
            if required not in entry:
                raise CliValidationError(f"experiments[{i}]: missing key {required!r}")
        if not Path(entry["dataset"]).exists():
            raise CliValidationError(
                f"experiments[{i}]: dataset file not found: {entry['dataset']}"
            )
        if "seed" in entry and "seeds" in entry:
            raise CliValidationError(f"experiments[{i}]: give either 'seed' or 'seeds'")
        seeds = entry.get("seeds", [entry.get("seed")])
        for seed in seeds:
            expanded = {k: v for k, v in entry.items() if k != "seeds"}
            expanded["seed"] = seed
            entries.append(expanded)

    return RunManifest(
        config_path=config_path,
        entries=tuple(entries),
        out_dir=out_dir,
        timestamp=datetime.now(timezone.utc).isoformat(),
    )


def _experiment_label(config: ExperimentConfig) -> str:
    return f"{config.dataset}__{config.ranking_model}__{config.algorithm}__seed{config.seed}"


def _run_entry(entry: dict, out_dir: str, min_cycle_size: int,
               default_seed: int, timing: str) -> str:
    """Execute one manifest entry; returns the results CSV path."""
    path = Path(entry["dataset"])
    ds = load_dataset(path, schema=entry.get("schema"),
                      history_len=entry.get("history_len", ds_mod.DEFAULT_HISTORY_LEN))
    ds = filter_cycles(ds, min_cycle_size)
    config = ExperimentConfig(
        dataset=path.stem,
        ranking_model=entry["ranking_model"],
        algorithm=entry["algorithm"],
        seed=entry["seed"] if entry["seed"] is not None else default_seed,
        budget_cap=entry.get("budget_cap", 1_000_000),
        episodes_factor=entry.get("episodes_factor", 200),
        plateau_window=entry.get("plateau_window", 100),
        agent_params=entry.get("agent_params", {}),
    )
    timer = time.perf_counter if timing == "wall" else None
    log.info("running %s", _experiment_label(config))
    results = run_experiment(config, ds, timer=timer)

    label = _experiment_label(config)
    results_path = Path(out_dir) / f"{label}.results.csv"
    persist_results(results, results_path, config)
    summary = summarize_results(config, results)
    summary_path = Path(out_dir) / f"{label}.summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return str(results_path)


def cmd_run(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(Path(args.config), out_dir)
    log.info("manifest %s: %d experiment(s)", manifest.config_path, len(manifest.entries))

    jobs = max(1, args.jobs)
    worker_args = [
        (entry, str(out_dir), args.min_cycle_size, args.seed, args.timing)
        for entry in manifest.entries
    ]
    if jobs == 1:
        for wa in worker_args:
            print(_run_entry(*wa))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_entry, *wa) for wa in worker_args]
            for future in futures:
                print(future.result())
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_SERIES_STYLE = {"APFD": "#1f77b4", "NRPA": "#d62728"}


def render_metric_svg(rows: list[dict], title: str) -> str:
    """Line chart of per-cycle metric values, one series per metric kind."""
    width, height = 720, 400
    ml, mr, mt, mb = 60, 24, 40, 56
    pw, ph = width - ml - mr, height - mt - mb
    cycles = sorted({r["cycle_id"] for r in rows})
    xpos = {c: ml + (pw * i / max(1, len(cycles) - 1)) for i, c in enumerate(cycles)}

    def y(value: float) -> float:
        return mt + ph * (1.0 - value)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        ty = y(tick)
        parts.append(
            f'<line x1="{ml}" y1="{ty:.1f}" x2="{width - mr}" y2="{ty:.1f}" '
            f'stroke="#dddddd"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{ty + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{tick:.2f}</text>'
        )
    step = max(1, len(cycles) // 8)
    for c in cycles[::step]:
        parts.append(
            f'<text x="{xpos[c]:.1f}" y="{height - mb + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{c}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">cycle</text>'
    )

    for kind, color in _SERIES_STYLE.items():
        series = [(r["cycle_id"], r["metric_value"]) for r in rows
                  if r["metric_kind"] == kind]
        if not series:
            continue
        points = " ".join(f"{xpos[c]:.1f},{y(v):.1f}" for c, v in series)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
            f'points="{points}"/>'
        )
        for c, v in series:
            parts.append(
                f'<circle cx="{xpos[c]:.1f}" cy="{y(v):.1f}" r="3" fill="{color}"/>'
            )
    legend_x = ml + 8
    for i, (kind, color) in enumerate(_SERIES_STYLE.items()):
        ly = mt + 14 + 16 * i
        parts.append(f'<rect x="{legend_x}" y="{ly - 9}" width="10" height="10" fill="{color}"/>')
        parts.append(
            f'<text x="{legend_x + 16}" y="{ly}" font-family="sans-serif" '
            f'font-size="12">{kind}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    experiments: list[tuple[str, list[dict]]] = []
    for results_path in args.results:
        path = Path(results_path)
        if not path.exists():
            raise CliValidationError(f"results file not found: {path}")
        rows = load_results(path)
        label = path.stem.removesuffix(".results")
        experiments.append((label, rows))

        svg_path = out_dir / f"{label}.svg"
        svg_path.write_text(render_metric_svg(rows, label), encoding="utf-8")
        plot_csv = out_dir / f"{label}.plot.csv"
        with plot_csv.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cycle_id", "metric_kind", "metric_value"])
            for r in rows:
                writer.writerow([r["cycle_id"], r["metric_kind"], repr(r["metric_value"])])
        print(f"{svg_path}\n{plot_csv}")

    if len(experiments) > 1:
        cle_path = out_dir / "cle.csv"
        with cle_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["experiment_a", "experiment_b", "n_common_cycles", "cle"])
            for i, (label_a, rows_a) in enumerate(experiments):
                for label_b, rows_b in experiments[i + 1:]:
                    common = {r["cycle_id"] for r in rows_a} & {r["cycle_id"] for r in rows_b}
                    if not common:
                        log.warning(
                            "no overlapping cycles between %s and %s; CLE skipped",
                            label_a, label_b,
                        )
                        continue
                    a = [r["metric_value"] for r in rows_a if r["cycle_id"] in common]
                    b = [r["metric_value"] for r in rows_b if r["cycle_id"] in common]
                    writer.writerow([label_a, label_b, len(common), repr(cle(a, b))])
        print(cle_path)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ciprio", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="normalize a raw log CSV")
    p_ingest.add_argument("input", type=Path)
    p_ingest.add_argument("--out", required=True, type=Path)
    p_ingest.add_argument("--map", action="append", metavar="CANONICAL=SOURCE",
                          help="column mapping, repeatable")
    p_ingest.add_argument("--features", help="comma-separated feature columns")
    p_ingest.add_argument("--history-len", type=int, default=ds_mod.DEFAULT_HISTORY_LEN)
    p_ingest.set_defaults(func=cmd_ingest)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", required=True, type=Path)
    p_synth.add_argument("--out", required=True, type=Path)
    p_synth.add_argument("--seed", type=int, default=None,
                         help="override the seed from the config file")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run the experiments in a manifest")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--out", required=True, type=Path)
    p_run.add_argument("--seed", type=int, default=0,
                       help="seed for manifest entries that do not set one")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--min-cycle-size", type=int, default=6)
    p_run.add_argument("--timing", choices=("off", "wall"), default="off",
                       help="wall records real training time and makes the "
                            "results CSV non-reproducible in that column")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser("report", help="plots and effect sizes from results")
    p_report.add_argument("results", nargs="+")
    p_report.add_argument("--out", required=True, type=Path)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CIPRIO_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliValidationError, DatasetError, ExperimentError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        log.exception("experiment failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
