from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field

from app.models import ClusterConfig, WorkloadConfig
from app.sim.cluster import RunResult
from app.sim.core import BARRIER_WAIT, DMA_WAIT, LSU_FULL, RAW_WAIT, CoreState
from app.sim.memory import BurstRecord, channel_loads, hbm_sustained_bandwidth

SCHEMA = "clustersim.metrics/1"
TOTAL = "total"
KERNEL_COLUMNS = (
    "name",
    "cycles",
    "active_cores",
    "retired",
    "raw_wait",
    "lsu_full",
    "barrier_wait",
    "dma_wait",
    "ops",
    "transfer_cycles",
    "exposed_cycles",
    "core_cycles",
    "ipc",
    "ops_per_cycle",
    "overhead",
)
FLOAT_COLUMNS = {"ipc", "ops_per_cycle", "overhead"}

Format = Literal["json", "csv"]


class StallBreakdown(BaseModel):
    model_config = ConfigDict(extra="forbid")

    raw_wait: int = 0
    lsu_full: int = 0
    barrier_wait: int = 0
    dma_wait: int = 0

    @property
    def total(self) -> int:
        return self.raw_wait + self.lsu_full + self.barrier_wait + self.dma_wait

    def as_dict(self) -> Dict[str, int]:
        return {RAW_WAIT: self.raw_wait, LSU_FULL: self.lsu_full, BARRIER_WAIT: self.barrier_wait, DMA_WAIT: self.dma_wait}


class KernelMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    cycles: int = 0
    active_cores: int = 0
    retired: int = 0
    stalls: StallBreakdown = Field(default_factory=StallBreakdown)
    ops: int = 0
    transfer_cycles: int = 0
    exposed_cycles: int = 0
    core_cycles: int = 0
    ipc: float = 0.0
    ops_per_cycle: float = 0.0
    overhead: float = 0.0


class HbmMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: str = "hbm"
    bytes: int = 0
    bursts: int = 0
    sustained_bytes_per_cycle: float = 0.0
    peak_bytes_per_cycle: float = 0.0
    efficiency: float = 0.0
    nominal_gbps: float = 0.0
    channel_bytes: List[int] = Field(default_factory=list)


class L1Metrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    accesses: int = 0
    bytes_per_cycle: float = 0.0
    peak_bytes_per_cycle: float = 0.0


class MemoryMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid")

    l1_digest: str = ""
    mismatches: int = 0
    max_error: float = 0.0
    passed: Optional[bool] = None


class MetricsReport(BaseModel):
    """Immutable snapshot of one run: per-kernel counters, memory traffic and the config echo."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    schema_: Literal["clustersim.metrics/1"] = Field(SCHEMA, alias="schema")
    kernel: str
    seed: int
    config: ClusterConfig
    workload: Optional[WorkloadConfig] = None
    cycles: int = 0
    drain_cycles: int = 0
    total: KernelMetrics = Field(default_factory=lambda: KernelMetrics(name=TOTAL))
    kernels: Dict[str, KernelMetrics] = Field(default_factory=dict)
    accounting_ok: bool = True
    hbm: HbmMetrics = Field(default_factory=HbmMetrics)
    l1: L1Metrics = Field(default_factory=L1Metrics)
    memory: MemoryMetrics = Field(default_factory=MemoryMetrics)
    double_buffer: Optional[bool] = None
    compute_only_cycles: Optional[int] = None
    latency_hiding_bound: Optional[int] = None
    nominal_gops: float = 0.0
    wall_time_us: float = 0.0
    extras: Dict[str, float] = Field(default_factory=dict)

    def kernel_metrics(self, kernel: str) -> KernelMetrics:
        if kernel == TOTAL:
            return self.total
        if kernel not in self.kernels:
            raise KeyError(f"unknown kernel {kernel!r}; report has {sorted(self.kernels)}")
        return self.kernels[kernel]


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _finish(m: KernelMetrics) -> KernelMetrics:
    m.ipc = _ratio(m.retired, m.active_cores * m.cycles)
    m.ops_per_cycle = _ratio(m.ops, m.cycles)
    m.overhead = min(1.0, _ratio(m.exposed_cycles, m.cycles))
    return m


def hbm_metrics(trace: Sequence[BurstRecord], cfg: ClusterConfig, model: str = "hbm") -> HbmMetrics:
    peak = float(cfg.hbm.peak_bytes_per_cycle)
    m = HbmMetrics(model=model, peak_bytes_per_cycle=peak)
    if not trace:
        return m
    m.bytes = sum(r.bytes for r in trace)
    m.bursts = len(trace)
    warmup = cfg.hbm.avg_latency if model == "hbm" else 0
    m.sustained_bytes_per_cycle = hbm_sustained_bandwidth(trace, warmup)
    m.efficiency = _ratio(m.sustained_bytes_per_cycle, peak)
    nominal_peak = cfg.hbm.nominal_gbps or peak * cfg.frequency_hz / 1e9
    m.nominal_gbps = m.efficiency * nominal_peak
    m.channel_bytes = channel_loads(trace, cfg.hbm.channels)
    return m


def accounting_holds(cores: Sequence[CoreState]) -> bool:
    """Every core's retired plus stalled cycles add up to the cycle it halted in."""
    for core in cores:
        spent = sum(b.retired + b.stalls for b in core.buckets.values())
        if spent != core.halt_cycle:
            return False
    return True


class MetricsCalculator:
    """Turns a raw RunResult into a MetricsReport."""

    @staticmethod
    def build_report(
        result: RunResult,
        cfg: ClusterConfig,
        *,
        kernel: str,
        seed: int,
        workload: Optional[WorkloadConfig] = None,
        verification=None,
        double_buffer: Optional[bool] = None,
        compute_only_cycles: Optional[int] = None,
        latency_hiding_bound: Optional[int] = None,
        extras: Optional[Dict[str, float]] = None,
    ) -> MetricsReport:
        kernels = MetricsCalculator._kernel_metrics(result)
        total = MetricsCalculator._total(result, kernels)
        memory = MemoryMetrics(l1_digest=result.l1.digest())
        if verification is not None:
            memory.mismatches = verification.mismatches
            memory.max_error = verification.max_error
            memory.passed = verification.passed
        freq = cfg.frequency_hz
        return MetricsReport(
            kernel=kernel,
            seed=seed,
            config=cfg,
            workload=workload,
            cycles=result.cycles,
            drain_cycles=result.drain_cycles,
            total=total,
            kernels=kernels,
            accounting_ok=accounting_holds(result.cores),
            hbm=hbm_metrics(result.burst_trace, cfg, result.memory.model_name),
            l1=L1Metrics(
                accesses=result.l1_accesses,
                bytes_per_cycle=_ratio(4 * result.l1_accesses, result.cycles),
                peak_bytes_per_cycle=4.0 * cfg.total_banks,
            ),
            memory=memory,
            double_buffer=double_buffer,
            compute_only_cycles=compute_only_cycles,
            latency_hiding_bound=latency_hiding_bound,
            nominal_gops=total.ops_per_cycle * freq / 1e9,
            wall_time_us=result.cycles / freq * 1e6,
            extras=dict(extras or {}),
        )

    @staticmethod
    def _kernel_metrics(result: RunResult) -> Dict[str, KernelMetrics]:
        out: Dict[str, KernelMetrics] = {}
        for label in result.labels():
            timing = result.kernels.get(label)
            m = KernelMetrics(name=label)
            if timing is not None:
                m.cycles = timing.cycles
                m.transfer_cycles = timing.transfer_cycles
                m.exposed_cycles = timing.exposed_cycles
            for core in result.cores:
                b = core.buckets.get(label)
                if b is None or b.cycles == 0:
                    continue
                m.active_cores += 1
                m.retired += b.retired
                m.ops += b.ops
                m.core_cycles += b.cycles
                m.stalls.raw_wait += b.raw_wait
                m.stalls.lsu_full += b.lsu_full
                m.stalls.barrier_wait += b.barrier_wait
                m.stalls.dma_wait += b.dma_wait
            if m.cycles == 0 and m.core_cycles == 0:
                continue
            out[label] = _finish(m)
        return out

    @staticmethod
    def _total(result: RunResult, kernels: Dict[str, KernelMetrics]) -> KernelMetrics:
        total = KernelMetrics(
            name=TOTAL,
            cycles=result.cycles,
            active_cores=sum(1 for c in result.cores if c.halt_cycle > 0),
            transfer_cycles=result.transfer_cycles,
            exposed_cycles=result.exposed_cycles,
        )
        for m in kernels.values():
            total.retired += m.retired
            total.ops += m.ops
            total.core_cycles += m.core_cycles
            total.stalls.raw_wait += m.stalls.raw_wait
            total.stalls.lsu_full += m.stalls.lsu_full
            total.stalls.barrier_wait += m.stalls.barrier_wait
            total.stalls.dma_wait += m.stalls.dma_wait
        return _finish(total)

    @staticmethod
    def save_report(report: MetricsReport, filepath: str | Path, fmt: Format = "json") -> None:
        """Save a report to disk in the given format."""
        Path(filepath).write_text(emit(report, fmt), encoding="utf-8")


def ipc(report: MetricsReport, kernel: str) -> float:
    """Retired instructions per active core per kernel cycle."""
    return report.kernel_metrics(kernel).ipc


def transfer_overhead(report: MetricsReport, kernel: str = TOTAL) -> float:
    """Exposed DMA cycles over the kernel's (or the whole run's) cycles."""
    return report.kernel_metrics(kernel).overhead


def _kernel_row(m: KernelMetrics) -> List[object]:
    flat = {**m.model_dump(exclude={"stalls"}), **m.stalls.model_dump()}
    return [flat[c] for c in KERNEL_COLUMNS]


def emit(report: MetricsReport, fmt: Format = "json") -> str:
    """Serialize a report. Field order is the model's declaration order."""
    if fmt == "json":
        return report.model_dump_json(by_alias=True, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    meta = report.model_dump(mode="json", by_alias=True, exclude={"kernels", "total", "schema_", "seed"})
    buf = io.StringIO()
    buf.write(f"# schema: {SCHEMA}\n")
    buf.write(f"# seed: {report.seed}\n")
    buf.write(f"# meta: {json.dumps(meta, separators=(',', ':'))}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(KERNEL_COLUMNS)
    for m in report.kernels.values():
        writer.writerow(_kernel_row(m))
    writer.writerow(_kernel_row(report.total))
    return buf.getvalue()


def _parse_row(row: Dict[str, str]) -> KernelMetrics:
    stalls = StallBreakdown(**{k: int(row[k]) for k in StallBreakdown.model_fields})
    values: Dict[str, object] = {"name": row["name"]}
    for key in KERNEL_COLUMNS[1:]:
        if key in StallBreakdown.model_fields:
            continue
        values[key] = float(row[key]) if key in FLOAT_COLUMNS else int(row[key])
    return KernelMetrics(stalls=stalls, **values)


def parse_report(text: str, fmt: Optional[Format] = None) -> MetricsReport:
    """Inverse of ``emit``; the format is sniffed when not given."""
    if fmt is None:
        fmt = "csv" if text.startswith("#") else "json"
    if fmt == "json":
        return MetricsReport.model_validate_json(text)
    headers: Dict[str, str] = {}
    body: List[str] = []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            headers[key] = value
        elif line:
            body.append(line)
    if headers.get("schema") != SCHEMA:
        raise ValueError(f"not a {SCHEMA} document")
    rows = [_parse_row(r) for r in csv.DictReader(body)]
    if not rows or rows[-1].name != TOTAL:
        raise ValueError("csv report has no total row")
    meta = json.loads(headers["meta"])
    return MetricsReport(
        seed=int(headers["seed"]),
        kernels={r.name: r for r in rows[:-1]},
        total=rows[-1],
        **meta,
    )


def load_report(path: str | Path) -> MetricsReport:
    return parse_report(Path(path).read_text(encoding="utf-8"))


def stall_table(report: MetricsReport) -> str:
    """Gnuplot-ready table: per kernel, the share of core cycles retiring and in each stall cause."""
    lines = ["# kernel retired raw_wait lsu_full barrier_wait dma_wait"]
    for m in [*report.kernels.values(), report.total]:
        den = m.core_cycles
        parts = [m.retired, m.stalls.raw_wait, m.stalls.lsu_full, m.stalls.barrier_wait, m.stalls.dma_wait]
        lines.append(" ".join([m.name] + [f"{_ratio(p, den):.4f}" for p in parts]))
    return "\n".join(lines) + "\n"


def transfer_table(report: MetricsReport) -> str:
    """Gnuplot-ready table: per kernel, compute cycles against exposed transfer cycles."""
    lines = ["# kernel compute_cycles exposed_cycles transfer_cycles"]
    for m in [*report.kernels.values(), report.total]:
        lines.append(f"{m.name} {m.cycles - m.exposed_cycles} {m.exposed_cycles} {m.transfer_cycles}")
    return "\n".join(lines) + "\n"
