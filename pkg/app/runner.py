from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO

from app.config import VARIANT_FREQUENCY_HZ, ConfigError
from app.kernels.artifacts import KernelArtifacts, VerifyResult, verify
from app.kernels.beamforming import build_beamforming
from app.kernels.chain import execute_chain
from app.kernels.chest import build_channel_estimate
from app.kernels.fft import build_fft
from app.kernels.mmse import build_mmse_inversion
from app.metrics import MetricsCalculator, MetricsReport, hbm_metrics
from app.models import ClusterConfig, WorkloadConfig
from app.program_parser import ProgramParser
from app.sim.bench import BENCHMARKS, build_bench, hbm_stream, latency_scan
from app.sim.cluster import Cluster

logger = logging.getLogger(__name__)

KERNEL_BUILDERS = {
    "fft": build_fft,
    "bf": build_beamforming,
    "chest": build_channel_estimate,
    "mmse": build_mmse_inversion,
}
RUNNABLE = (*KERNEL_BUILDERS, "chain", "stream", *BENCHMARKS, "latency", "program")
SWEEP_VARIANTS = (7, 9, 11)


@dataclass
class RunSettings:
    """Everything one ``run`` needs besides the cluster and the workload."""

    seed: int = 1
    double_buffer: bool = True
    memory: str = "hbm"
    scramble: bool = True
    trace: Optional[TextIO] = None
    program: Optional[str | Path] = None
    options: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RunOutcome:
    report: MetricsReport
    verification: Optional[VerifyResult] = None
    notes: List[str] = field(default_factory=list)
    passed: bool = True

    def diff_summary(self) -> str:
        """Per output region: words compared, mismatches and oracle error."""
        lines = [f"# {self.report.kernel} seed={self.report.seed} l1={self.report.memory.l1_digest[:16]}"]
        if self.verification is not None:
            for c in self.verification.checks:
                err = "-" if c.error is None else f"{c.error:.3e}"
                status = "PASS" if c.passed else "FAIL"
                lines.append(f"{status} {c.name}: {c.words} words, {c.mismatches} mismatches, error {err} (tol {c.tolerance:g})")
        lines += self.notes
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines) + "\n"


def _kernel_run(name: str, cfg: ClusterConfig, w: WorkloadConfig, s: RunSettings) -> RunOutcome:
    artifacts: KernelArtifacts = KERNEL_BUILDERS[name](w, cfg, seed=s.seed, **s.options)
    cluster = Cluster(cfg, memory=s.memory, seed=s.seed, scramble=s.scramble, trace=s.trace)
    result = artifacts.run(cluster)
    verification = verify(artifacts, result)
    extras = {f"ops_expected.{name}": float(artifacts.op_count)}
    extras.update({f"info.{k}": float(v) for k, v in artifacts.info.items() if isinstance(v, (int, float))})
    report = MetricsCalculator.build_report(
        result,
        cfg,
        kernel=name,
        seed=s.seed,
        workload=w,
        verification=verification,
        extras=extras,
    )
    return RunOutcome(report, verification, passed=verification.passed)


def _bench_run(name: str, cfg: ClusterConfig, s: RunSettings) -> RunOutcome:
    case = build_bench(name, cfg, **s.options)
    cluster = Cluster(cfg, memory=s.memory, seed=s.seed, scramble=s.scramble, trace=s.trace)
    for addr, words in case.l1_image.items():
        cluster.l1.load_words(addr, words)
    result = cluster.run(case.programs)
    report = MetricsCalculator.build_report(result, cfg, kernel=name, seed=s.seed)
    return RunOutcome(report, notes=[f"{case.active_cores} active cores"])


def _stream_run(cfg: ClusterConfig, s: RunSettings) -> RunOutcome:
    stream = hbm_stream(cfg, scramble=s.scramble, seed=s.seed, **s.options)
    report = MetricsReport(
        kernel="stream",
        seed=s.seed,
        config=cfg,
        cycles=stream.cycles,
        hbm=hbm_metrics(stream.trace, cfg),
        wall_time_us=stream.cycles / cfg.frequency_hz * 1e6,
    )
    note = f"{stream.bytes} bytes at {stream.sustained_bytes_per_cycle:.1f} B/cycle ({stream.efficiency:.2%} of peak)"
    return RunOutcome(report, notes=[note])


def _latency_run(cfg: ClusterConfig, s: RunSettings) -> RunOutcome:
    """Every (core, bank) pair once without contention; each class must see exactly its latency."""
    observed = latency_scan(cfg, **s.options)
    extras: Dict[str, float] = {}
    notes = []
    passed = True
    for cls, seen in sorted(observed.items()):
        want = cfg.latency_of_class(cls)
        extras[f"latency.{cls}.min"] = float(min(seen))
        extras[f"latency.{cls}.max"] = float(max(seen))
        ok = seen == {want}
        passed = passed and ok
        notes.append(f"{'PASS' if ok else 'FAIL'} {cls}: observed {sorted(seen)}, expected {want}")
    report = MetricsReport(kernel="latency", seed=s.seed, config=cfg, extras=extras)
    return RunOutcome(report, notes=notes, passed=passed)


def _program_run(cfg: ClusterConfig, s: RunSettings) -> RunOutcome:
    if s.program is None:
        raise ConfigError("kernel 'program' needs a program file")
    try:
        text = Path(s.program).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read program {s.program}: {e.strerror or e}") from e
    programs = ProgramParser(cfg).parse_all(text)
    result = Cluster(cfg, memory=s.memory, seed=s.seed, scramble=s.scramble, trace=s.trace).run(programs)
    report = MetricsCalculator.build_report(result, cfg, kernel="program", seed=s.seed)
    return RunOutcome(report)


def run_kernel(kernel: str, cfg: ClusterConfig, w: WorkloadConfig, settings: Optional[RunSettings] = None) -> RunOutcome:
    s = settings or RunSettings()
    logger.info("running %s on %s (%d cores), seed %d", kernel, cfg.name, cfg.total_cores, s.seed)
    if kernel in KERNEL_BUILDERS:
        return _kernel_run(kernel, cfg, w, s)
    if kernel == "chain":
        run = execute_chain(
            w,
            cfg,
            double_buffer=s.double_buffer,
            seed=s.seed,
            memory=s.memory,
            scramble=s.scramble,
            trace=s.trace,
            **s.options,
        )
        return RunOutcome(run.report, run.verification, passed=run.verification.passed)
    if kernel == "stream":
        return _stream_run(cfg, s)
    if kernel in BENCHMARKS:
        return _bench_run(kernel, cfg, s)
    if kernel == "latency":
        return _latency_run(cfg, s)
    if kernel == "program":
        return _program_run(cfg, s)
    raise ConfigError(f"unknown kernel {kernel!r}; choose from {', '.join(RUNNABLE)}")


@dataclass
class SweepRow:
    variant: int
    report: MetricsReport

    @property
    def cycles(self) -> int:
        return self.report.cycles


@dataclass
class SweepResult:
    kernel: str
    rows: List[SweepRow]

    @property
    def monotonic(self) -> bool:
        cycles = [r.cycles for r in self.rows]
        return all(a <= b for a, b in zip(cycles, cycles[1:]))

    def table(self) -> str:
        lines = [f"# {self.kernel}: variant cycles ipc nominal_us"]
        for r in self.rows:
            lines.append(f"{r.variant} {r.cycles} {r.report.total.ipc:.4f} {r.report.wall_time_us:.3f}")
        lines.append(f"# monotonic: {'PASS' if self.monotonic else 'FAIL'}")
        return "\n".join(lines) + "\n"


def run_sweep(
    kernel: str,
    cfg: ClusterConfig,
    w: WorkloadConfig,
    settings: Optional[RunSettings] = None,
    variants: Sequence[int] = SWEEP_VARIANTS,
) -> SweepResult:
    """Same kernel and seed at every remote latency; nominal time uses each variant's frequency."""
    s = settings or RunSettings()
    rows = []
    for v in sorted(variants):
        variant_cfg = cfg.with_variant(v, VARIANT_FREQUENCY_HZ.get(v))
        rows.append(SweepRow(v, run_kernel(kernel, variant_cfg, w, s).report))
    sweep = SweepResult(kernel, rows)
    if not sweep.monotonic:
        logger.warning("%s: cycles not monotonic across variants %s", kernel, [r.cycles for r in rows])
    return sweep
