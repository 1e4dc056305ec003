"""Experiment runner and metrics pipeline.

Runs the (strategy, seed) grid, computes per-run summaries (final accuracy,
rounds-to-target, load-balance statistics, alignment recovery, simulated
wall-clock), and emits byte-stable artifacts: ``metrics.csv`` (one row per
round per run), ``summary.csv``, ``heatmap.json`` (cumulative client-expert
assignment counts), ``manifest.json`` (the full resolved config), and per-run
parameter/score checkpoints.

All floats are written with 9 significant digits and LF line endings so
reruns of the same manifest diff clean.  A directory holding a manifest for
a *different* config is refused rather than overwritten.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model, scheduler
from .errors import InputError
from .federation import RoundRecord, SimConfig, World, build_world, run_simulation

MANIFEST_VERSION = 1


class OutputConflictError(RuntimeError):
    """Output directory already holds results for a different manifest."""


def rounds_to_target(accuracy_series: Sequence[float], target: float) -> int | None:
    """1-based index of the first round reaching the target, else None."""
    if len(accuracy_series) == 0:
        raise InputError("accuracy series must be non-empty")
    if not 0.0 < target < 1.0:
        raise InputError(f"target must be in (0, 1), got {target}")
    for i, acc in enumerate(accuracy_series):
        if acc >= target:
            return i + 1
    return None


def load_stats(contributions: Sequence[float] | np.ndarray) -> tuple[float, float]:
    """(coefficient of variation, Gini) of a non-negative load vector."""
    x = np.asarray(contributions, dtype=np.float64)
    if x.size == 0:
        raise InputError("load vector must be non-empty")
    if np.any(x < 0):
        raise InputError("load entries must be non-negative")
    mean = float(np.mean(x))
    if mean == 0.0:
        return 0.0, 0.0
    cv = float(np.std(x)) / mean
    ordered = np.sort(x)
    n = x.size
    ranks = np.arange(1, n + 1)
    gini = float(2.0 * np.sum(ranks * ordered) / (n * np.sum(ordered)) - (n + 1) / n)
    return cv, gini


def alignment_recovery(fitness: np.ndarray, oracle: Mapping[int, int]) -> float:
    """Fraction of clients whose argmax fitness row (ties to the lower id)
    names their planted expert."""
    fitness = np.asarray(fitness)
    if fitness.ndim != 2 or fitness.shape[0] != len(oracle):
        raise InputError(f"fitness shape {fitness.shape} inconsistent with oracle of {len(oracle)} clients")
    hits = sum(1 for c, e in oracle.items() if int(np.argmax(fitness[c])) == e)
    return hits / len(oracle)


@dataclass(frozen=True)
class ExperimentSummary:
    """Per (strategy, seed) outcome of one simulation run."""

    strategy: str
    seed: int
    final_accuracy: float
    rounds_to_target: int | None
    cumulative_updates: tuple[int, ...]  # per-expert assignment counts over all rounds
    load_cv: float
    load_gini: float
    alignment_recovery: float
    total_time_seconds: float


@dataclass(frozen=True)
class RunResult:
    """Raw outputs of one run kept for summary computation and checkpoints."""

    strategy: str
    seed: int
    records: tuple[RoundRecord, ...]
    final_params: model.MoEParams
    final_state: scheduler.ScoreState
    heatmap: np.ndarray  # (num_clients, num_experts) cumulative assignments

    @property
    def accuracy_series(self) -> list[float]:
        return [r.accuracy for r in self.records]


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def _execute_run(config: SimConfig, strategy: str, seed: int, world_cache: dict,
                 per_round: Callable[[str, int, RoundRecord], None] | None) -> RunResult:
    cfg = replace(config, strategy=strategy, seed=seed)
    # Worlds depend on the seed but not the strategy; share across strategies.
    if seed not in world_cache:
        world_cache[seed] = build_world(replace(cfg, strategy=scheduler.STRATEGY_LOAD_BALANCED))
    world: World = world_cache[seed]
    hook = None
    if per_round is not None:
        hook = lambda record: per_round(strategy, seed, record)
    params, state, records = run_simulation(cfg, world=world, progress=hook)
    heatmap = np.zeros((cfg.num_clients, cfg.num_experts), dtype=np.int64)
    for record in records:
        if record.plan is not None:
            for c, experts in record.plan.assignments.items():
                for e in experts:
                    heatmap[c, e] += 1
    return RunResult(
        strategy=strategy,
        seed=seed,
        records=tuple(records),
        final_params=params,
        final_state=state,
        heatmap=heatmap,
    )


def _summarize(run: RunResult, target: float | None, lb_final: Mapping[int, float],
               oracle: Mapping[int, int]) -> ExperimentSummary:
    series = run.accuracy_series
    final_acc = series[-1] if series else 0.0
    effective_target = target
    if effective_target is None and run.seed in lb_final:
        # Self-relative default: 80% of the load-balanced run's own final
        # accuracy for the same seed.
        effective_target = 0.8 * lb_final[run.seed]
    rtt = None
    if series and effective_target is not None and 0.0 < effective_target < 1.0:
        rtt = rounds_to_target(series, effective_target)
    cum = run.heatmap.sum(axis=0)
    cv, gini = load_stats(cum) if cum.sum() > 0 else (0.0, 0.0)
    return ExperimentSummary(
        strategy=run.strategy,
        seed=run.seed,
        final_accuracy=final_acc,
        rounds_to_target=rtt,
        cumulative_updates=tuple(int(v) for v in cum),
        load_cv=cv,
        load_gini=gini,
        alignment_recovery=alignment_recovery(run.final_state.fitness, oracle),
        total_time_seconds=sum(r.round_time_seconds for r in run.records),
    )


def _manifest_bytes(config: SimConfig, strategies: Sequence[str], seeds: Sequence[int],
                    target: float | None) -> bytes:
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": asdict(config),
        "strategies": list(strategies),
        "seeds": list(seeds),
        "target": target if target is not None else "self_relative_0.8",
    }
    return (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _write_metrics(path: Path, runs: Sequence[RunResult], num_experts: int) -> None:
    expert_cols = [f"expert_{e}" for e in range(num_experts)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "strategy", "seed", "accuracy", "loss", "round_time", "cum_time"] + expert_cols)
        for run in runs:
            cum_time = 0.0
            for record in run.records:
                cum_time += record.round_time_seconds
                counts = record.assignment_counts(num_experts)
                writer.writerow(
                    [record.round_index + 1, run.strategy, run.seed,
                     _fmt(record.accuracy), _fmt(record.loss),
                     _fmt(record.round_time_seconds), _fmt(cum_time)]
                    + [int(v) for v in counts]
                )


def _write_summary(path: Path, summaries: Sequence[ExperimentSummary], num_experts: int) -> None:
    expert_cols = [f"cum_expert_{e}" for e in range(num_experts)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["strategy", "seed", "final_accuracy", "rounds_to_target", "load_cv",
             "load_gini", "alignment_recovery", "total_time_seconds"] + expert_cols
        )
        for s in summaries:
            writer.writerow(
                [s.strategy, s.seed, _fmt(s.final_accuracy),
                 s.rounds_to_target if s.rounds_to_target is not None else "",
                 _fmt(s.load_cv), _fmt(s.load_gini), _fmt(s.alignment_recovery),
                 _fmt(s.total_time_seconds)]
                + list(s.cumulative_updates)
            )


def _write_heatmap(path: Path, runs: Sequence[RunResult], num_clients: int, num_experts: int) -> None:
    payload = {
        "num_clients": num_clients,
        "num_experts": num_experts,
        "counts_total": int(sum(run.heatmap.sum() for run in runs)),
        "runs": [
            {
                "strategy": run.strategy,
                "seed": run.seed,
                "counts": run.heatmap.tolist(),
            }
            for run in runs
        ],
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def run_experiment(
    config: SimConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    target: float | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    per_round: Callable[[str, int, RoundRecord], None] | None = None,
) -> tuple[list[ExperimentSummary], list[RunResult]]:
    """Run the strategy x seed grid, summarize, and emit files.

    Results reduce in (strategy, seed) list order regardless of ``workers``,
    so parallel execution emits byte-identical files.
    """
    if not strategies or not seeds:
        raise InputError("strategies and seeds must be non-empty")
    if len(set(strategies)) != len(strategies) or len(set(seeds)) != len(seeds):
        raise InputError("strategies and seeds must not repeat")
    if target is not None and not 0.0 < target < 1.0:
        raise InputError(f"target must be in (0, 1), got {target}")
    config.validate()

    out_path: Path | None = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        manifest = _manifest_bytes(config, strategies, seeds, target)
        manifest_file = out_path / "manifest.json"
        if manifest_file.exists() and manifest_file.read_bytes() != manifest:
            raise OutputConflictError(
                f"{manifest_file} holds a different configuration; refusing to overwrite"
            )
        _write(manifest_file, manifest)

    grid = [(s, n) for s in strategies for n in seeds]
    world_cache: dict[int, World] = {}
    if workers > 1 and len(grid) > 1:
        # Pre-build shared worlds serially: the cache is then read-only.
        for _, n in grid:
            if n not in world_cache:
                world_cache[n] = build_world(replace(config, seed=n))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                (s, n): pool.submit(_execute_run, config, s, n, world_cache, per_round)
                for s, n in grid
            }
            runs = [futures[key].result() for key in grid]
    else:
        runs = [_execute_run(config, s, n, world_cache, per_round) for s, n in grid]

    oracle = {c: c % config.num_experts for c in range(config.num_clients)}
    lb_final = {
        run.seed: run.accuracy_series[-1]
        for run in runs
        if run.strategy == scheduler.STRATEGY_LOAD_BALANCED and run.records
    }
    summaries = [_summarize(run, target, lb_final, oracle) for run in runs]

    if out_path is not None:
        try:
            _write_metrics(out_path / "metrics.csv", runs, config.num_experts)
            _write_summary(out_path / "summary.csv", summaries, config.num_experts)
            _write_heatmap(out_path / "heatmap.json", runs, config.num_clients, config.num_experts)
            for run in runs:
                tag = f"{run.strategy}_{run.seed}"
                model.save_params(out_path / f"params_{tag}.ckpt", run.final_params,
                                  seed=run.seed, round_index=len(run.records))
                scores = {"rounds": len(run.records), "state": run.final_state.to_dict()}
                (out_path / f"scores_{tag}.json").write_text(
                    json.dumps(scores, sort_keys=True, indent=2) + "\n", encoding="utf-8"
                )
        except OSError as exc:
            raise OSError(f"failed writing experiment output under {out_path}: {exc}") from exc

    return summaries, runs


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def summaries_nonfinite(summaries: Sequence[ExperimentSummary]) -> bool:
    """True if any run produced a non-finite metric (CLI failure signal)."""
    for s in summaries:
        values = [s.final_accuracy, s.load_cv, s.load_gini, s.alignment_recovery, s.total_time_seconds]
        if any(not math.isfinite(v) for v in values):
            return True
    return False
