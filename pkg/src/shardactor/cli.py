"""Command-line entry point: run a benchmark scenario and emit its report."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .harness.chaos import CRASH, MODES, ChaosSchedule, parse_kill_spec
from .kv import FaultPlan
from .scenarios import SCENARIOS, ScenarioSpec, run_scenario
from .worker import POLLING_PRESETS_MS

DEFAULT_REQUESTS = {"banking": 600, "hotel": 500}


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _interval_ms(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"polling interval must be positive, got {text}")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be within [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="shardactor",
        description="Run the banking or hotel workload on a simulated worker cluster and check its oracles.",
    )
    p.add_argument("--scenario", choices=SCENARIOS, default="banking")
    p.add_argument("--workers", type=_positive_int, default=2)
    p.add_argument(
        "--polling-interval-ms",
        type=_interval_ms,
        default=500.0,
        help=f"inbox polling interval; presets {', '.join(map(str, POLLING_PRESETS_MS))}",
    )
    p.add_argument("--requests", type=_non_negative_int, default=None, help="default 600 (banking) / 500 (hotel)")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--kill-workers", default="", metavar="COUNT@SECONDS[,...]", help="e.g. 1@3,2@8.5")
    p.add_argument("--kill-mode", choices=MODES, default=CRASH)
    p.add_argument("--stall-seconds", type=float, default=15.0, help="stall length for --kill-mode stall")
    p.add_argument("--report-path", default=None, help="write the line-delimited JSON report here")
    p.add_argument("--fake-clock", action="store_true", help="run on virtual time")
    p.add_argument("--accounts", type=_positive_int, default=300)
    p.add_argument("--banks", type=_positive_int, default=20)
    p.add_argument("--users", type=_positive_int, default=20)
    p.add_argument("--hotels", type=_positive_int, default=10)
    p.add_argument("--processing-time-ms", type=float, default=20.0)
    p.add_argument("--transient-failure-probability", type=_probability, default=0.0)
    p.add_argument("--store-latency-ms", type=float, nargs=2, default=(1.0, 4.0), metavar=("MIN", "MAX"))
    p.add_argument("--arrival-rate", type=float, default=50.0, help="requests per second")
    p.add_argument("--quiet", action="store_true", help="suppress the summary table")
    return p


def spec_from_args(args: argparse.Namespace) -> ScenarioSpec:
    kills = parse_kill_spec(
        args.kill_workers,
        workers=args.workers,
        seed=args.seed,
        mode=args.kill_mode,
        stall_duration=args.stall_seconds,
    )
    lo, hi = args.store_latency_ms
    plan = FaultPlan(args.seed, args.transient_failure_probability, (lo / 1000, hi / 1000))
    requests = args.requests if args.requests is not None else DEFAULT_REQUESTS[args.scenario]
    return ScenarioSpec(
        args.scenario,
        requests=requests,
        accounts=args.accounts,
        banks=args.banks,
        users=args.users,
        hotels=args.hotels,
        workers=args.workers,
        polling_interval=args.polling_interval_ms / 1000,
        processing_time=args.processing_time_ms / 1000,
        chaos=ChaosSchedule(args.seed, tuple(kills), plan),
        seed=args.seed,
        fake_clock=args.fake_clock,
        arrival_rate=args.arrival_rate,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        spec = spec_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))
    report = run_scenario(spec)
    if args.report_path:
        report.write(args.report_path)
    if not args.quiet:
        print(report.summary_table())
    return 0 if report.passed else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
