"""Command-line entry point.

Subcommands: ``simulate`` (one strategy run), ``compare`` (the three-strategy
experiment), ``gradcheck`` / ``oracle-check`` (self-verification suites), and
``gen-data`` (export the synthetic per-client datasets).

Exit codes are a stable contract: 0 success, 1 runtime or verification
failure, 2 usage/config error.  All randomness flows from the single master
seed, printed at startup.  Environment variables are not consulted except
``OUT_DIR`` as a fallback for ``--out-dir``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, replace

from . import __version__, datagen, harness, scheduler, verify
from .config import load_config
from .errors import ConfigError
from .federation import RoundRecord, SimConfig, build_world

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

COMPARE_STRATEGIES = (
    scheduler.STRATEGY_RANDOM,
    scheduler.STRATEGY_GREEDY,
    scheduler.STRATEGY_LOAD_BALANCED,
)


@dataclass
class CliInvocation:
    """A parsed command line: one subcommand plus resolved overrides."""

    subcommand: str
    config_path: str | None
    seed: int | None
    strategy: str | None
    rounds: int | None
    seeds: list[int] | None
    out_dir: str | None
    workers: int
    target: float | None
    verbosity: int


def _uint(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"value {value} is out of range (must be >= 0)")
    return value


def _positive_int(text: str) -> int:
    value = _uint(text)
    if value == 0:
        raise argparse.ArgumentTypeError("value must be >= 1")
    return value


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated integer list")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError(f"{text!r} must list seeds >= 0")
    return seeds


def _target(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"target {value} is out of range (0, 1)")
    return value


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH", help="TOML config file (defaults apply if omitted)")
    sub.add_argument("--seed", type=_uint, metavar="U64", help="override the master seed")
    sub.add_argument("--strategy", choices=scheduler.STRATEGIES, help="override the assignment strategy")
    sub.add_argument("--rounds", type=_uint, metavar="N", help="override the number of rounds")
    sub.add_argument("--seeds", type=_seed_list, metavar="LIST", help="comma-separated seeds for compare")
    sub.add_argument("--out-dir", metavar="PATH", help="output directory (or OUT_DIR env var)")
    sub.add_argument("--workers", type=_positive_int, default=1, metavar="N", help="parallel runs (default 1)")
    sub.add_argument("--target", type=_target, metavar="FLOAT", help="absolute accuracy target for rounds-to-target")
    sub.add_argument("-v", "--verbose", action="count", default=0, help="per-round log lines (-vv for more)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmoesim",
        description="Deterministic federated mixture-of-experts training simulator",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in [
        ("simulate", "run one simulation with the configured strategy"),
        ("compare", "run random/greedy/load_balanced and print the comparison table"),
        ("gradcheck", "finite-difference check of the model gradients"),
        ("oracle-check", "brute-force check of the load-balanced assignment"),
        ("gen-data", "export the synthetic per-client datasets"),
    ]:
        sub = subparsers.add_parser(name, help=help_text)
        _add_common(sub)
    return parser


def parse_and_validate(argv: list[str]) -> CliInvocation:
    args = build_parser().parse_args(argv)
    out_dir = args.out_dir if args.out_dir is not None else os.environ.get("OUT_DIR")
    return CliInvocation(
        subcommand=args.subcommand,
        config_path=args.config,
        seed=args.seed,
        strategy=args.strategy,
        rounds=args.rounds,
        seeds=args.seeds,
        out_dir=out_dir,
        workers=args.workers,
        target=args.target,
        verbosity=args.verbose,
    )


def _resolve_config(inv: CliInvocation) -> SimConfig:
    config = load_config(inv.config_path) if inv.config_path is not None else SimConfig()
    overrides = {}
    if inv.seed is not None:
        overrides["seed"] = inv.seed
    if inv.strategy is not None:
        overrides["strategy"] = inv.strategy
    if inv.rounds is not None:
        overrides["num_rounds"] = inv.rounds
    if overrides:
        config = replace(config, **overrides)
    config.validate()
    return config


def _round_logger(verbosity: int):
    if verbosity <= 0:
        return None

    def log(strategy: str, seed: int, record: RoundRecord) -> None:
        line = (
            f"[{strategy} seed={seed}] round {record.round_index + 1}: "
            f"accuracy={record.accuracy:.4f} loss={record.loss:.4f} "
            f"time={record.round_time_seconds:.2f}s"
        )
        if verbosity >= 2 and record.plan is not None:
            pairs = ", ".join(f"{c}->{list(es)}" for c, es in sorted(record.plan.assignments.items()))
            line += f" assignments: {pairs}"
        print(line)

    return log


def _print_summary_table(summaries: list[harness.ExperimentSummary]) -> None:
    header = f"{'strategy':<14} {'seed':>4} {'final_acc':>9} {'rounds_to_target':>16} {'load_cv':>8} {'gini':>6} {'align':>6} {'sim_time_s':>10}"
    print(header)
    print("-" * len(header))
    for s in summaries:
        rtt = str(s.rounds_to_target) if s.rounds_to_target is not None else "-"
        print(
            f"{s.strategy:<14} {s.seed:>4} {s.final_accuracy:>9.4f} {rtt:>16} "
            f"{s.load_cv:>8.3f} {s.load_gini:>6.3f} {s.alignment_recovery:>6.2f} {s.total_time_seconds:>10.1f}"
        )


def cmd_simulate(inv: CliInvocation) -> int:
    config = _resolve_config(inv)
    print(f"effective master seed: {config.seed}")
    summaries, _ = harness.run_experiment(
        config,
        strategies=[config.strategy],
        seeds=[config.seed],
        target=inv.target,
        out_dir=inv.out_dir,
        workers=inv.workers,
        per_round=_round_logger(inv.verbosity),
    )
    _print_summary_table(summaries)
    return EXIT_FAILURE if harness.summaries_nonfinite(summaries) else EXIT_OK


def cmd_compare(inv: CliInvocation) -> int:
    config = _resolve_config(inv)
    seeds = inv.seeds if inv.seeds is not None else [config.seed]
    print(f"effective master seed: {config.seed}")
    summaries, _ = harness.run_experiment(
        config,
        strategies=list(COMPARE_STRATEGIES),
        seeds=seeds,
        target=inv.target,
        out_dir=inv.out_dir,
        workers=inv.workers,
        per_round=_round_logger(inv.verbosity),
    )
    _print_summary_table(summaries)
    return EXIT_FAILURE if harness.summaries_nonfinite(summaries) else EXIT_OK


def cmd_gradcheck(inv: CliInvocation) -> int:
    seed = inv.seed if inv.seed is not None else 0
    result = verify.run_grad_check(num_instances=50, seed=seed)
    print(f"checked {result.params_checked} parameters across 50 instances")
    print(f"max relative error: {result.max_rel_error:.3e} (tolerance {verify.GRAD_TOLERANCE:.0e})")
    if not result.passed:
        print(
            f"FAIL at {result.worst_param}{list(result.worst_index)}: "
            f"analytic={result.analytic:.6e} numeric={result.numeric:.6e}"
        )
        return EXIT_FAILURE
    print("gradient check passed")
    return EXIT_OK


def cmd_oracle_check(inv: CliInvocation) -> int:
    seed = inv.seed if inv.seed is not None else 0
    result = verify.run_oracle_check(seed=seed)
    print(f"enumerated {result.instances_checked} instances")
    if not result.passed:
        inst, client, expected, actual = result.mismatches[0]
        print("FAIL: scheduler disagrees with brute force; first counterexample:")
        print(inst.describe())
        print(f"client {client}: expected {sorted(expected)}, got {sorted(actual)}")
        return EXIT_FAILURE
    print("assignment oracle check passed")
    return EXIT_OK


def cmd_gen_data(inv: CliInvocation) -> int:
    config = _resolve_config(inv)
    if inv.out_dir is None:
        print("gen-data requires --out-dir (or OUT_DIR)", file=sys.stderr)
        return EXIT_USAGE
    print(f"effective master seed: {config.seed}")
    world = build_world(config)
    written = datagen.export_client_data(world.client_data, inv.out_dir, seed=config.seed)
    print(f"wrote {len(written)} files for {len(world.client_data)} clients to {inv.out_dir}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else argv
    try:
        inv = parse_and_validate(argv)
    except SystemExit as exc:
        # argparse handles its own messaging; pass its code through.
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        handler = {
            "simulate": cmd_simulate,
            "compare": cmd_compare,
            "gradcheck": cmd_gradcheck,
            "oracle-check": cmd_oracle_check,
            "gen-data": cmd_gen_data,
        }[inv.subcommand]
        return handler(inv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.OutputConflictError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
