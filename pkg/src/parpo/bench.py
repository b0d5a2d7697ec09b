"""Benchmark harness: run the training loop at a ladder of worker counts and
report collection-time medians, speedups and the collection/learning time
split, as CSV and JSON.

The busy env is the default subject because its per-step cost is calibrated
and uniform, so the curve measures the pipeline rather than episode-length
variance. The first iteration of every trial is excluded from aggregates as
warm-up (process spawn, calibration, allocator churn), and medians are used
throughout: the queue pipeline has inherent timing variance.
"""

from __future__ import annotations

import json
import os
import platform
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

from dataclasses import asdict

from .envs import EnvSpec, busy_spec, calibrate_busy_loop
from .errors import ConfigurationError
from .learner import PpoHyper, default_hyper
from .orchestrator import RunConfig, RunLog, format_run_csv_row, RUN_CSV_HEADER, train
from .sampler import DEFAULT_CHUNK_CAP

BENCH_CSV_HEADER = "n_workers,trial,iter,collect_s,learn_s,samples,dropped_stale"


@dataclass(frozen=True)
class BenchConfig:
    worker_counts: tuple[int, ...] = (1, 2, 4, 8)
    trials: int = 3
    iters_per_trial: int = 5
    samples_per_iter: int = 20000
    env_spec: EnvSpec = field(default_factory=busy_spec)
    hyper: PpoHyper | None = None
    base_seed: int = 0
    chunk_cap: int = DEFAULT_CHUNK_CAP
    hidden_dims: tuple[int, ...] = (64, 64)
    out_dir: Path | None = None

    def __post_init__(self) -> None:
        if not self.worker_counts:
            raise ConfigurationError("worker_counts must be nonempty")
        if any(n < 1 for n in self.worker_counts):
            raise ConfigurationError("worker counts must be >= 1")
        if list(self.worker_counts) != sorted(set(self.worker_counts)):
            raise ConfigurationError("worker_counts must be strictly ascending")
        if self.trials < 1 or self.iters_per_trial < 1:
            raise ConfigurationError("trials and iters_per_trial must be >= 1")


@dataclass(frozen=True)
class BenchRow:
    n_workers: int
    trial: int
    iteration: int
    collect_s: float
    learn_s: float
    samples: int
    dropped_stale: int


@dataclass
class BenchReport:
    """Raw per-iteration rows plus machine metadata; aggregates are derived."""

    worker_counts: tuple[int, ...]
    trials: int
    iters_per_trial: int
    samples_per_iter: int
    base_seed: int
    env_kind: str
    step_cost_us: int
    machine: dict
    hyper: dict = field(default_factory=dict)  # held fixed across N, recorded
    rows: list[BenchRow] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    def _steady_rows(self, n_workers: int) -> list[BenchRow]:
        # Iteration 0 of each trial is warm-up.
        return [r for r in self.rows if r.n_workers == n_workers and r.iteration > 0]

    def median_collect(self, n_workers: int) -> float:
        rows = self._steady_rows(n_workers)
        if not rows:
            raise ConfigurationError(f"no steady-state rows for n_workers={n_workers}")
        return statistics.median(r.collect_s for r in rows)

    def median_learn(self, n_workers: int) -> float:
        rows = self._steady_rows(n_workers)
        if not rows:
            raise ConfigurationError(f"no steady-state rows for n_workers={n_workers}")
        return statistics.median(r.learn_s for r in rows)

    def speedup(self, n_workers: int) -> float:
        if 1 not in self.worker_counts:
            raise ConfigurationError("speedup needs the N=1 baseline in worker_counts")
        return self.median_collect(1) / self.median_collect(n_workers)

    def collect_share_pct(self, n_workers: int) -> float:
        mc = self.median_collect(n_workers)
        ml = self.median_learn(n_workers)
        return 100.0 * mc / (mc + ml)


def machine_metadata() -> dict:
    """Logical/physical core counts and the busy-loop calibration, embedded in
    every report: speedup numbers mean nothing without them."""
    logical = os.cpu_count() or 1
    physical = logical
    try:
        pairs = set()
        cur: dict[str, str] = {}
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if not line.strip():
                if "physical id" in cur and "core id" in cur:
                    pairs.add((cur["physical id"], cur["core id"]))
                cur = {}
            elif ":" in line:
                key, val = line.split(":", 1)
                cur[key.strip()] = val.strip()
        if "physical id" in cur and "core id" in cur:
            pairs.add((cur["physical id"], cur["core id"]))
        if pairs:
            physical = len(pairs)
    except OSError:
        pass
    return {
        "logical_cores": logical,
        "physical_cores": physical,
        "platform": platform.platform(),
        "python": sys.version.split()[0],
        "busy_spin_iters_per_us": calibrate_busy_loop(),
    }


def run_bench(config: BenchConfig, verbose: bool = False) -> BenchReport:
    """One full train() per (worker count, trial) cell, everything except the
    worker count held fixed. The report is rewritten after every cell so an
    interrupted sweep still leaves usable output; a failed cell is recorded
    and the remaining cells continue."""
    hyper = config.hyper if config.hyper is not None else default_hyper(config.env_spec.kind)
    report = BenchReport(
        worker_counts=config.worker_counts,
        trials=config.trials,
        iters_per_trial=config.iters_per_trial,
        samples_per_iter=config.samples_per_iter,
        base_seed=config.base_seed,
        env_kind=config.env_spec.kind,
        step_cost_us=config.env_spec.step_cost_us,
        machine=machine_metadata(),
        hyper=asdict(hyper),
    )
    for n_workers in config.worker_counts:
        for trial in range(config.trials):
            run_config = RunConfig(
                env_spec=config.env_spec,
                n_workers=n_workers,
                samples_per_iter=config.samples_per_iter,
                n_iters=config.iters_per_trial,
                hyper=config.hyper,
                base_seed=config.base_seed,
                chunk_cap=config.chunk_cap,
                eval_episodes=0,  # timing harness; evaluation would only add noise
                hidden_dims=config.hidden_dims,
            )
            try:
                run_log = train(run_config)
            except Exception as exc:  # record and move on to the next cell
                report.errors.append(
                    {"n_workers": n_workers, "trial": trial, "error": f"{type(exc).__name__}: {exc}"}
                )
                if verbose:
                    print(f"bench cell N={n_workers} trial={trial} failed: {exc}")
                continue
            for log in run_log.iterations:
                report.rows.append(
                    BenchRow(
                        n_workers=n_workers,
                        trial=trial,
                        iteration=log.iteration,
                        collect_s=log.timing.collect_time_s,
                        learn_s=log.timing.learn_time_s,
                        samples=log.timing.samples_gathered,
                        dropped_stale=log.timing.chunks_dropped_stale,
                    )
                )
            if verbose:
                mc = statistics.median(
                    log.timing.collect_time_s for log in run_log.iterations
                )
                print(f"bench cell N={n_workers} trial={trial}: median collect {mc:.3f}s")
            if config.out_dir is not None:
                write_bench_csv(report, Path(config.out_dir) / "bench.csv")
                write_bench_json(report, Path(config.out_dir) / "bench.json")
    return report


def speedup_table(report: BenchReport) -> list[dict]:
    """Per worker count: median collection time, speedup vs N=1, and the
    collection/learning shares of iteration time. Over-linear speedups are
    flagged rather than silently reported."""
    if 1 not in report.worker_counts:
        raise ConfigurationError("speedup table needs the N=1 baseline")
    rows = []
    for n in report.worker_counts:
        collect_share = report.collect_share_pct(n)
        speedup = report.speedup(n)
        rows.append(
            {
                "n_workers": n,
                "median_collect_s": report.median_collect(n),
                "median_learn_s": report.median_learn(n),
                "speedup": speedup,
                "collect_share_pct": collect_share,
                "learn_share_pct": 100.0 - collect_share,
                "over_linear": speedup > n,
            }
        )
    return rows


def write_run_csv(run_log: RunLog, path: Path) -> Path:
    """Whole-run CSV in the same schema train() streams incrementally."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(RUN_CSV_HEADER + "\n")
        for log in run_log.iterations:
            f.write(format_run_csv_row(log) + "\n")
    return path


def write_bench_csv(report: BenchReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(BENCH_CSV_HEADER + "\n")
        for r in report.rows:
            f.write(
                f"{r.n_workers},{r.trial},{r.iteration},"
                f"{r.collect_s!r},{r.learn_s!r},{r.samples},{r.dropped_stale}\n"
            )
    return path


def report_to_dict(report: BenchReport) -> dict:
    aggregates = []
    try:
        aggregates = speedup_table(report)
    except ConfigurationError:
        pass  # no N=1 baseline or an all-failed cell; raw rows still go out
    return {
        "config": {
            "worker_counts": list(report.worker_counts),
            "trials": report.trials,
            "iters_per_trial": report.iters_per_trial,
            "samples_per_iter": report.samples_per_iter,
            "base_seed": report.base_seed,
            "env_kind": report.env_kind,
            "step_cost_us": report.step_cost_us,
            "hyper": report.hyper,
        },
        "machine": report.machine,
        "rows": [
            {
                "n_workers": r.n_workers,
                "trial": r.trial,
                "iter": r.iteration,
                "collect_s": r.collect_s,
                "learn_s": r.learn_s,
                "samples": r.samples,
                "dropped_stale": r.dropped_stale,
            }
            for r in report.rows
        ],
        "aggregates": aggregates,
        "errors": report.errors,
    }


def write_bench_json(report: BenchReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report_to_dict(report), indent=2) + "\n", encoding="utf-8")
    return path
