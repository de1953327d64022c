from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import DefaultDict, Dict, List, Optional, Sequence, TextIO, Tuple

from app.config import ConfigError
from app.models import ClusterConfig
from app.sim.core import BarrierUnit, CoreModel, CoreState, DEFAULT_BUCKET, Program
from app.sim.dma import DmaEngine, DmaFrontend
from app.sim.interconnect import Interconnect, MemResponse
from app.sim.memory import BurstRecord, L1Store, make_main_memory
from app.sim.providers import MainMemoryModel

logger = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    """No core, memory or DMA progress while cores are still running."""

    def __init__(self, message: str, cycle: int, diagnostics: List[str]) -> None:
        super().__init__(message + "\n  " + "\n  ".join(diagnostics))
        self.cycle = cycle
        self.diagnostics = diagnostics
        logger.error("deadlock at cycle %d: %s", cycle, message)
        for line in diagnostics:
            logger.debug("  %s", line)


@dataclass
class KernelTiming:
    cycles: int = 0
    transfer_cycles: int = 0
    exposed_cycles: int = 0


@dataclass
class RunResult:
    """Raw outcome of one simulation: per-core counters, timelines and final memory state."""

    cycles: int
    cores: List[CoreState]
    timeline: List[Tuple[int, str]]
    kernels: Dict[str, KernelTiming]
    transfer_cycles: int
    exposed_cycles: int
    drain_cycles: int
    l1: L1Store
    memory: MainMemoryModel
    burst_trace: List[BurstRecord] = field(default_factory=list)
    l1_accesses: int = 0
    dma_bytes: int = 0

    @property
    def retired(self) -> int:
        return sum(c.retired for c in self.cores)

    def labels(self) -> List[str]:
        seen: Dict[str, None] = {}
        for _, label in self.timeline:
            seen.setdefault(label, None)
        for c in self.cores:
            for label in c.buckets:
                seen.setdefault(label, None)
        return list(seen)


class Cluster:
    """Lock-step driver for cores, L1 interconnect, DMA and main memory.

    Per cycle: deliver responses due now, step every running core in id order,
    arbitrate the banks, then let the DMA use whatever bank slots the cores left.
    """

    def __init__(
        self,
        cfg: ClusterConfig,
        memory: str | MainMemoryModel = "hbm",
        seed: int = 0,
        scramble: bool = True,
        trace: Optional[TextIO] = None,
    ) -> None:
        self.cfg = cfg
        self.seed = seed
        self.l1 = L1Store(cfg)
        if isinstance(memory, str):
            memory = make_main_memory(memory, cfg.hbm, seed=seed, scramble_enabled=scramble)
        self.memory = memory
        self.interconnect = Interconnect(cfg, self.l1, trace=trace)
        self.dma = DmaEngine(cfg, self.l1, memory)
        self.frontend = DmaFrontend(self.dma)
        self.barriers = BarrierUnit({})
        self.cores: List[CoreModel] = []

    def _load(self, programs: Sequence[Program]) -> List[CoreModel]:
        n = self.cfg.total_cores
        if len(programs) > n:
            raise ConfigError(f"{len(programs)} programs for a cluster of {n} cores")
        programs = list(programs) + [Program() for _ in range(n - len(programs))]
        participants: Counter = Counter()
        for prog in programs:
            prog.validate()
            participants.update(prog.barrier_ids())
        self.barriers = BarrierUnit(dict(participants))
        self.cores = [CoreModel(i, p, self, self.cfg.scoreboard_depth) for i, p in enumerate(programs)]
        return self.cores

    def _diagnostics(self, running: Sequence[CoreModel]) -> List[str]:
        lines = []
        for core in running[:16]:
            st = core.state
            lines.append(
                f"core {st.core_id}: pc={st.pc} cause={st.last_cause} barrier={st.waiting_barrier} "
                f"loads={st.outstanding_loads} stores={st.pending_stores}"
            )
        if len(running) > 16:
            lines.append(f"... {len(running) - 16} more cores")
        lines.append(f"barriers waiting: {self.barriers.waiting()}")
        lines.append(f"interconnect in flight: {self.interconnect.in_flight}; dma busy: {self.dma.busy}")
        return lines

    def run(self, programs: Sequence[Program]) -> RunResult:
        cores = self._load(programs)
        ic = self.interconnect
        dma = self.dma
        window = self.cfg.deadlock_window
        core0 = cores[0]
        running = list(cores)
        due: List[MemResponse] = []
        timing: DefaultDict[str, KernelTiming] = defaultdict(KernelTiming)
        transfer = exposed = 0
        cycle = 0
        last_progress = 0
        end_cycle = 0
        logger.info("run start: %d cores, %d instructions", len(cores), sum(len(c.program) for c in cores))

        while True:
            for rsp in due:
                cores[rsp.core_id].deliver(rsp)
            dma_busy = dma.busy
            dma.now = cycle
            arrivals_before = self.barriers.arrivals
            issued = 0
            halted = False
            still: List[CoreModel] = []
            for core in running:
                cause = core.step(cycle)
                if core.state.halted:
                    halted = True
                    continue
                still.append(core)
                if cause is None:
                    issued += 1
            running = still
            if not running:
                end_cycle = cycle
                break
            label = core0.state.label
            if dma_busy:
                transfer += 1
                timing[label].transfer_cycles += 1
                if not issued:
                    exposed += 1
                    timing[label].exposed_cycles += 1

            bursts_before = len(dma.trace)
            served_before = ic.served_total
            due = ic.tick(cycle)
            dma.tick(cycle, ic.served_banks)
            progressed = (
                issued
                or halted
                or ic.served_total != served_before
                or len(dma.trace) != bursts_before
                or dma.busy != dma_busy
                or self.barriers.arrivals != arrivals_before
            )
            if progressed:
                last_progress = cycle
            if cycle - last_progress > window:
                raise DeadlockError(f"no progress for {window} cycles", cycle, self._diagnostics(running))

            nxt = cycle + 1
            if not progressed and not due and not ic.has_queued():
                target = self._next_event(cycle, running)
                if target is None:
                    raise DeadlockError(
                        f"cores stalled at cycle {cycle} with nothing left in flight", cycle, self._diagnostics(running)
                    )
                skipped = target - nxt
                if skipped > 0:
                    for core in running:
                        core.state.bucket().stall(core.state.last_cause, skipped)
                    if dma.busy:
                        transfer += skipped
                        exposed += skipped
                        timing[label].transfer_cycles += skipped
                        timing[label].exposed_cycles += skipped
                    nxt = target
            cycle = nxt

        drain = self._drain(end_cycle)
        timeline = [(0, DEFAULT_BUCKET)] + core0.marks
        for i, (start, label) in enumerate(timeline):
            stop = timeline[i + 1][0] if i + 1 < len(timeline) else end_cycle
            if stop > start:
                timing[label].cycles += stop - start
        # labels the coordinator never ran take the longest per-core span
        spans: Dict[str, int] = {}
        for core in cores:
            for label, bucket in core.state.buckets.items():
                spans[label] = max(spans.get(label, 0), bucket.cycles)
        for label, span in spans.items():
            if timing[label].cycles == 0:
                timing[label].cycles = span
        logger.info("run end: %d cycles, %d exposed transfer cycles", end_cycle, exposed)
        return RunResult(
            cycles=end_cycle,
            cores=[c.state for c in cores],
            timeline=timeline,
            kernels=dict(timing),
            transfer_cycles=transfer,
            exposed_cycles=exposed,
            drain_cycles=drain,
            l1=self.l1,
            memory=self.memory,
            burst_trace=list(dma.trace),
            l1_accesses=ic.served_total,
            dma_bytes=dma.bytes_moved,
        )

    def _next_event(self, cycle: int, running: Sequence[CoreModel]) -> Optional[int]:
        events = []
        delivery = self.interconnect.next_delivery()
        if delivery is not None:
            events.append(delivery - 1)
        dma_event = self.dma.next_event()
        if dma_event is not None:
            events.append(dma_event)
        for core in running:
            wake = core.state.wake
            if wake is not None:
                events.append(wake)
        if not events:
            return None
        return max(min(events), cycle + 1)

    def _drain(self, cycle: int) -> int:
        """Finish in-flight stores and DMA bursts after the last core halted."""
        ic = self.interconnect
        dma = self.dma
        start = cycle
        due: List[MemResponse] = []
        while not (ic.idle() and dma.idle()):
            for rsp in due:
                self.cores[rsp.core_id].deliver(rsp)
            due = ic.tick(cycle)
            dma.tick(cycle, ic.served_banks)
            cycle += 1
            if cycle - start > self.cfg.deadlock_window:
                raise DeadlockError("memory did not drain", cycle, self._diagnostics([]))
        for rsp in due:
            self.cores[rsp.core_id].deliver(rsp)
        return cycle - start


def run(cfg: ClusterConfig, programs: Sequence[Program], **kwargs) -> RunResult:
    return Cluster(cfg, **kwargs).run(programs)
