from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import ExitStack
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.config import (
    DEFAULT_PRESET,
    VARIANT_FREQUENCY_HZ,
    ConfigError,
    default_workload,
    list_presets,
    load_config,
    load_preset,
)
from app.evaluation import ExpectationChecker, ExpectationSchemaError
from app.metrics import MetricsCalculator, emit, load_report, stall_table, transfer_table
from app.models import ClusterConfig, WorkloadConfig
from app.program_parser import ProgramSyntaxError
from app.runner import RUNNABLE, SWEEP_VARIANTS, RunOutcome, RunSettings, run_kernel, run_sweep
from app.sim.cluster import DeadlockError
from app.sim.dma import DmaFault

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
LOG_LEVEL_ENV = "CLUSTERSIM_LOG_LEVEL"

WORKLOAD_FLAGS = {
    "antennas": "n_antennas",
    "subcarriers": "n_subcarriers",
    "beams": "n_beams",
    "tx": "n_tx",
    "fft_size": "fft_size",
    "symbols": "n_symbols",
    "noise_variance": "noise_variance",
}
KERNEL_OPTIONS = {
    "fft": ("impulse", "cores"),
    "bf": ("identity", "cores"),
    "chest": ("pilot_kind", "cores"),
    "mmse": ("identity", "cores"),
    "chain": ("cores",),
    "hammer": ("contenders",),
}


class UsageError(Exception):
    """Bad flags; reported with exit status 2."""


def _add_target(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="cluster config JSON document")
    p.add_argument("--preset", help=f"named preset (default {DEFAULT_PRESET})")
    p.add_argument("--kernel", default="fft", help=f"one of: {', '.join(RUNNABLE)}")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--memory", choices=("hbm", "ideal"), default="hbm")
    p.add_argument("--no-scramble", action="store_true", help="disable the main-memory address scrambler")
    p.add_argument("--double-buffer", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--program", help="program text for --kernel program")
    p.add_argument("--cores", type=int, help="restrict a kernel to the first N cores")
    p.add_argument("--impulse", action="store_true", help="fft: unit impulse input")
    p.add_argument("--identity", action="store_true", help="bf/mmse: identity matrix case")
    p.add_argument("--pilots", dest="pilot_kind", choices=("qpsk", "one", "j"), default="qpsk")
    p.add_argument("--contenders", type=int, help="hammer: cores on the shared bank")
    g = p.add_argument_group("workload overrides")
    g.add_argument("--antennas", type=int)
    g.add_argument("--subcarriers", type=int)
    g.add_argument("--beams", type=int)
    g.add_argument("--tx", type=int)
    g.add_argument("--fft-size", type=int)
    g.add_argument("--symbols", type=int)
    g.add_argument("--noise-variance", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustersim", description="Cycle-level shared-L1 cluster simulator")
    parser.add_argument("--log-level", default=None, help=f"logging level (default ${LOG_LEVEL_ENV} or WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one kernel, chain or benchmark")
    _add_target(run)
    run.add_argument("--variant", type=int, help="remote latency 7, 9 or 11")
    run.add_argument("--out", help="report path; the diff summary and tables go next to it")
    run.add_argument("--emit", choices=("json", "csv"), default="json")
    run.add_argument("--trace", help="write the interconnect request/response trace here")

    sweep = sub.add_parser("sweep", help="run a kernel at every remote latency variant")
    _add_target(sweep)
    sweep.add_argument("--variants", default=",".join(str(v) for v in SWEEP_VARIANTS))
    sweep.add_argument("--out", help="directory for per-variant reports and the table")
    sweep.add_argument("--emit", choices=("json", "csv"), default="json")

    check = sub.add_parser("check", help="evaluate an expectations file against a report")
    check.add_argument("report")
    check.add_argument("expectations")
    check.add_argument("--out", help="write the pass/fail list as JSON")

    presets = sub.add_parser("presets", help="list presets or show one")
    presets.add_argument("name", nargs="?")
    return parser


def _configure_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise UsageError(f"unknown log level {name!r}")
    logging.basicConfig(level=name, format="[%(name)s] %(message)s", force=True)


def _cluster(args: argparse.Namespace) -> ClusterConfig:
    if args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    cfg = load_config(args.config) if args.config else load_preset(args.preset or DEFAULT_PRESET)
    variant = getattr(args, "variant", None)
    if variant is not None:
        cfg = cfg.with_variant(variant, VARIANT_FREQUENCY_HZ.get(variant))
    return cfg


def _workload(args: argparse.Namespace, cfg: ClusterConfig) -> WorkloadConfig:
    overrides = {field: getattr(args, flag) for flag, field in WORKLOAD_FLAGS.items() if getattr(args, flag) is not None}
    return default_workload(cfg, **overrides)


def _settings(args: argparse.Namespace) -> RunSettings:
    options: Dict[str, Any] = {}
    for name in KERNEL_OPTIONS.get(args.kernel, ()):
        value = getattr(args, name)
        if value not in (None, False) and not (name == "pilot_kind" and value == "qpsk"):
            options[name] = value
    return RunSettings(
        seed=args.seed,
        double_buffer=args.double_buffer,
        memory=args.memory,
        scramble=not args.no_scramble,
        program=args.program,
        options=options,
    )


def _print_outcome(outcome: RunOutcome) -> None:
    report = outcome.report
    print(f"{report.kernel} on {report.config.name}: {report.cycles} cycles, seed {report.seed}")
    for m in [*report.kernels.values(), report.total]:
        stalls = " ".join(f"{k}={v}" for k, v in m.stalls.as_dict().items())
        print(
            f"  {m.name:<10} cycles={m.cycles} ipc={m.ipc:.3f} ops/cycle={m.ops_per_cycle:.2f} "
            f"overhead={m.overhead:.4f} {stalls}"
        )
    if report.hbm.bytes:
        print(f"  hbm: {report.hbm.bytes} bytes, {report.hbm.efficiency:.2%} of peak ({report.hbm.nominal_gbps:.1f} GB/s nominal)")
    if report.compute_only_cycles is not None:
        print(
            f"  compute-only: {report.compute_only_cycles} cycles; "
            f"excess {report.cycles - report.compute_only_cycles} of bound {report.latency_hiding_bound}"
        )
    print(outcome.diff_summary(), end="")


def _write_outputs(outcome: RunOutcome, out: str, fmt: str) -> None:
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    MetricsCalculator.save_report(outcome.report, path, fmt)
    stem = path.with_suffix("")
    Path(f"{stem}.diff.txt").write_text(outcome.diff_summary(), encoding="utf-8")
    Path(f"{stem}.stalls.dat").write_text(stall_table(outcome.report), encoding="utf-8")
    Path(f"{stem}.transfers.dat").write_text(transfer_table(outcome.report), encoding="utf-8")
    logger.info("report written to %s", path)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _cluster(args)
    w = _workload(args, cfg)
    settings = _settings(args)
    with ExitStack() as stack:
        if args.trace:
            settings.trace = stack.enter_context(open(args.trace, "w", encoding="utf-8"))
        outcome = run_kernel(args.kernel, cfg, w, settings)
    _print_outcome(outcome)
    if args.out:
        _write_outputs(outcome, args.out, args.emit)
    elif args.emit == "csv":
        print(emit(outcome.report, "csv"), end="")
    return EXIT_OK if outcome.passed else EXIT_FAIL


def _variants(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise UsageError(f"--variants expects comma-separated integers, got {text!r}") from e


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _cluster(args)
    w = _workload(args, cfg)
    sweep = run_sweep(args.kernel, cfg, w, _settings(args), _variants(args.variants))
    table = sweep.table()
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for row in sweep.rows:
            MetricsCalculator.save_report(row.report, out / f"{args.kernel}-{row.variant}.{args.emit}", args.emit)
        (out / f"{args.kernel}-sweep.dat").write_text(table, encoding="utf-8")
    return EXIT_OK if sweep.monotonic else EXIT_FAIL


def cmd_check(args: argparse.Namespace) -> int:
    try:
        report = load_report(args.report)
    except (ValidationError, ValueError) as e:
        raise ExpectationSchemaError(f"{args.report}: not a metrics report ({e})") from e
    checker = ExpectationChecker.from_source(args.expectations)
    result = checker.check(report)
    print(result.summary())
    if args.out:
        ExpectationChecker.save_report(result, args.out)
    return EXIT_OK if result.passed else EXIT_FAIL


def cmd_presets(args: argparse.Namespace) -> int:
    if args.name:
        print(json.dumps(load_preset(args.name).model_dump(), indent=2))
    else:
        for name in list_presets():
            print(name)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "check": cmd_check, "presets": cmd_presets}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        _configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ExpectationSchemaError, ProgramSyntaxError, ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DeadlockError as e:
        print(f"deadlock at cycle {e.cycle}: {e}", file=sys.stderr)
        return EXIT_FAIL
    except DmaFault as e:
        print(f"fault: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
