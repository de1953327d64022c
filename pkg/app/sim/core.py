from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple, Union

from app.models import DmaDescriptor
from app.sim.alu import ALU_OPS, MASK32
from app.sim.dma import STATUS, DmaFault
from app.sim.interconnect import AMO_ADD, READ, WRITE, MemRequest, MemResponse
from app.utils import ceil_log2

NUM_REGS = 32
PENDING = 1 << 62

RAW_WAIT = "raw-wait"
LSU_FULL = "lsu-full"
BARRIER_WAIT = "barrier-wait"
DMA_WAIT = "dma-wait"
STALL_CAUSES = (RAW_WAIT, LSU_FULL, BARRIER_WAIT, DMA_WAIT)

DEFAULT_BUCKET = "main"


class DecodeFault(ValueError):
    """Malformed instruction or program."""


class BarrierError(RuntimeError):
    """Arrival at a barrier the cluster does not know, or more arrivals than participants."""


# ---- instruction IR --------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Load:
    rd: int
    offset: int
    base: int = 0


@dataclass(frozen=True, slots=True)
class Store:
    rs: int
    offset: int
    base: int = 0


@dataclass(frozen=True, slots=True)
class AmoAdd:
    rd: int
    offset: int
    base: int
    rs: int


@dataclass(frozen=True, slots=True)
class Compute:
    dst: int
    srcs: Tuple[int, ...]
    fn: str
    imm: int = 0
    op_count: int = 1
    latency: int = 1


@dataclass(frozen=True, slots=True)
class Branch:
    kind: str  # beqz | bnez | j
    rs: int
    target: int


@dataclass(frozen=True, slots=True)
class Barrier:
    barrier_id: int


@dataclass(frozen=True, slots=True)
class DmaStart:
    descriptor: int
    src_reg: int = 0
    dst_reg: int = 0


@dataclass(frozen=True, slots=True)
class DmaWait:
    pass


@dataclass(frozen=True, slots=True)
class Mark:
    label: str


@dataclass(frozen=True, slots=True)
class Halt:
    pass


Instr = Union[Load, Store, AmoAdd, Compute, Branch, Barrier, DmaStart, DmaWait, Mark, Halt]


def compute(dst: int, srcs: Tuple[int, ...], fn: str, imm: int = 0) -> Compute:
    """COMPUTE with op count and latency taken from the ALU table."""
    op = ALU_OPS[fn]
    return Compute(dst, tuple(srcs), fn, imm, op.ops, op.latency)


@dataclass
class Program:
    instrs: List[Instr] = field(default_factory=list)
    descriptors: List[DmaDescriptor] = field(default_factory=list)
    labels: Dict[str, int] = field(default_factory=dict)
    name: str = ""

    def __len__(self) -> int:
        return len(self.instrs)

    def barrier_ids(self) -> Set[int]:
        return {i.barrier_id for i in self.instrs if type(i) is Barrier}

    def op_count(self) -> int:
        return sum(i.op_count for i in self.instrs if type(i) is Compute)

    def validate(self) -> None:
        n = len(self.instrs)
        for pc, ins in enumerate(self.instrs):
            regs: Tuple[int, ...] = ()
            kind = type(ins)
            if kind is Load:
                regs = (ins.rd, ins.base)
            elif kind is Store:
                regs = (ins.rs, ins.base)
            elif kind is AmoAdd:
                regs = (ins.rd, ins.base, ins.rs)
            elif kind is Compute:
                regs = (ins.dst, *ins.srcs)
                op = ALU_OPS.get(ins.fn)
                if op is None:
                    raise DecodeFault(f"pc {pc}: unknown operation {ins.fn!r}")
                if op.arity != len(ins.srcs):
                    raise DecodeFault(f"pc {pc}: {ins.fn} takes {op.arity} sources, got {len(ins.srcs)}")
                if ins.op_count < 1 or ins.latency < 1:
                    raise DecodeFault(f"pc {pc}: op_count and latency must be at least 1")
            elif kind is Branch:
                regs = (ins.rs,)
                if ins.kind not in ("beqz", "bnez", "j"):
                    raise DecodeFault(f"pc {pc}: unknown branch {ins.kind!r}")
                if not 0 <= ins.target <= n:
                    raise DecodeFault(f"pc {pc}: branch target {ins.target} outside program")
            elif kind is DmaStart:
                regs = (ins.src_reg, ins.dst_reg)
                if not 0 <= ins.descriptor < len(self.descriptors):
                    raise DecodeFault(f"pc {pc}: no DMA descriptor #{ins.descriptor}")
            elif kind is Barrier:
                if ins.barrier_id < 0:
                    raise DecodeFault(f"pc {pc}: negative barrier id")
            elif kind not in (DmaWait, Mark, Halt):
                raise DecodeFault(f"pc {pc}: not an instruction: {ins!r}")
            for r in regs:
                if not 0 <= r < NUM_REGS:
                    raise DecodeFault(f"pc {pc}: register r{r} outside r0..r{NUM_REGS - 1}")


# ---- barriers --------------------------------------------------------------

def barrier_release(barrier_id: int, arrived: int, total: int, cycle: int) -> Optional[int]:
    """Release cycle once the last participant arrived at ``cycle``; None while still waiting.

    The wake-up is modeled as a log-depth tree with at least one cycle.
    """
    if barrier_id < 0:
        raise BarrierError(f"invalid barrier id {barrier_id}")
    if total < 1 or arrived > total:
        raise BarrierError(f"barrier {barrier_id}: {arrived} arrivals for {total} participants")
    if arrived < total:
        return None
    return cycle + max(1, ceil_log2(total))


class BarrierUnit:
    def __init__(self, participants: Dict[int, int]) -> None:
        self.participants = participants
        self._arrived: Dict[Tuple[int, int], int] = {}
        self._release: Dict[Tuple[int, int], int] = {}
        self.pending: Dict[Tuple[int, int], List[int]] = {}
        self.arrivals = 0

    def arrive(self, barrier_id: int, generation: int, core_id: int, cycle: int) -> Optional[int]:
        total = self.participants.get(barrier_id)
        if total is None:
            raise BarrierError(f"core {core_id} arrived at unknown barrier {barrier_id}")
        key = (barrier_id, generation)
        arrived = self._arrived.get(key, 0) + 1
        self.arrivals += 1
        self._arrived[key] = arrived
        self.pending.setdefault(key, []).append(core_id)
        release = barrier_release(barrier_id, arrived, total, cycle)
        if release is not None:
            self._release[key] = release
            del self.pending[key]
        return release

    def release_of(self, barrier_id: int, generation: int) -> Optional[int]:
        return self._release.get((barrier_id, generation))

    def waiting(self) -> Dict[Tuple[int, int], List[int]]:
        return {k: list(v) for k, v in self.pending.items()}


# ---- core ------------------------------------------------------------------

@dataclass(slots=True)
class Bucket:
    retired: int = 0
    ops: int = 0
    raw_wait: int = 0
    lsu_full: int = 0
    barrier_wait: int = 0
    dma_wait: int = 0

    def stall(self, cause: str, n: int = 1) -> None:
        if cause == RAW_WAIT:
            self.raw_wait += n
        elif cause == LSU_FULL:
            self.lsu_full += n
        elif cause == BARRIER_WAIT:
            self.barrier_wait += n
        else:
            self.dma_wait += n

    @property
    def stalls(self) -> int:
        return self.raw_wait + self.lsu_full + self.barrier_wait + self.dma_wait

    @property
    def cycles(self) -> int:
        return self.retired + self.stalls


@dataclass
class CoreState:
    core_id: int
    pc: int = 0
    regs: List[int] = field(default_factory=lambda: [0] * NUM_REGS)
    ready: List[int] = field(default_factory=lambda: [0] * NUM_REGS)
    outstanding_loads: int = 0
    pending_stores: int = 0
    halted: bool = False
    halt_cycle: int = 0
    retired: int = 0
    label: str = DEFAULT_BUCKET
    buckets: Dict[str, Bucket] = field(default_factory=dict)
    barrier_generation: Dict[int, int] = field(default_factory=dict)
    waiting_barrier: Optional[Tuple[int, int]] = None
    wake: Optional[int] = None
    last_cause: Optional[str] = None
    descriptor_ids: List[int] = field(default_factory=list)

    def bucket(self) -> Bucket:
        b = self.buckets.get(self.label)
        if b is None:
            b = self.buckets[self.label] = Bucket()
        return b

    def stall_totals(self) -> Dict[str, int]:
        totals = dict.fromkeys(STALL_CAUSES, 0)
        for b in self.buckets.values():
            totals[RAW_WAIT] += b.raw_wait
            totals[LSU_FULL] += b.lsu_full
            totals[BARRIER_WAIT] += b.barrier_wait
            totals[DMA_WAIT] += b.dma_wait
        return totals


class CoreModel:
    """Single-issue in-order core with a load scoreboard.

    Loads issue without blocking; the destination register stays pending until its
    response arrives. ``step`` either retires one instruction or returns the stall cause.
    """

    def __init__(self, core_id: int, program: Program, cluster, scoreboard_depth: int = 8) -> None:
        self.state = CoreState(core_id)
        self.program = program
        self._instrs = program.instrs
        self._cluster = cluster
        self._depth = scoreboard_depth
        self._seq = 0
        self.marks: List[Tuple[int, str]] = []

    @property
    def halted(self) -> bool:
        return self.state.halted

    def deliver(self, rsp: MemResponse) -> None:
        st = self.state
        if rsp.op == WRITE:
            st.pending_stores -= 1
            return
        st.outstanding_loads -= 1
        if rsp.tag > 0:
            st.regs[rsp.tag] = rsp.rdata
        if rsp.tag > 0:
            st.ready[rsp.tag] = rsp.deliver_cycle

    def _request(self, cycle: int, op: str, addr: int, wdata: int = 0, tag: int = -1) -> None:
        self._seq += 1
        self._cluster.interconnect.submit(cycle, MemRequest(self._seq, self.state.core_id, op, addr, wdata, cycle, tag))

    def _retire(self, st: CoreState, ops: int = 0) -> None:
        b = st.bucket()
        b.retired += 1
        b.ops += ops
        st.retired += 1
        st.last_cause = None
        st.wake = None

    def _stall(self, st: CoreState, cause: str, wake: Optional[int] = None) -> str:
        st.bucket().stall(cause)
        st.last_cause = cause
        st.wake = wake
        return cause

    def step(self, cycle: int) -> Optional[str]:
        st = self.state
        assert not st.halted, f"core {st.core_id} stepped after halt"
        instrs = self._instrs
        ready = st.ready
        regs = st.regs

        if st.waiting_barrier is not None:
            release = self._cluster.barriers.release_of(*st.waiting_barrier)
            if release is None or cycle < release:
                return self._stall(st, BARRIER_WAIT, release)
            st.waiting_barrier = None

        while True:
            if st.pc >= len(instrs):
                ins: Instr = Halt()
            else:
                ins = instrs[st.pc]
            kind = type(ins)
            if kind is Mark:
                st.label = ins.label
                if st.core_id == 0:
                    self.marks.append((cycle, ins.label))
                st.pc += 1
                continue
            if kind is Halt:
                st.halted = True
                st.halt_cycle = cycle
                st.last_cause = None
                return None
            break

        if kind is Compute:
            latest = 0
            for r in ins.srcs:
                if ready[r] > latest:
                    latest = ready[r]
            if ready[ins.dst] > latest:
                latest = ready[ins.dst]
            if latest > cycle:
                return self._stall(st, RAW_WAIT, latest if latest < PENDING else None)
            op = ALU_OPS[ins.fn]
            args = [regs[r] for r in ins.srcs]
            if op.uses_imm:
                args.append(ins.imm)
            if ins.dst:
                regs[ins.dst] = op.fn(*args) & MASK32
                ready[ins.dst] = cycle + ins.latency
            st.pc += 1
            self._retire(st, ins.op_count)
            return None

        if kind is Load or kind is AmoAdd:
            waits = [ready[ins.base], ready[ins.rd]]
            if kind is AmoAdd:
                waits.append(ready[ins.rs])
            latest = max(waits)
            if latest > cycle:
                return self._stall(st, RAW_WAIT, latest if latest < PENDING else None)
            if st.outstanding_loads >= self._depth:
                return self._stall(st, LSU_FULL)
            addr = (regs[ins.base] + ins.offset) & MASK32
            st.outstanding_loads += 1
            if ins.rd:
                ready[ins.rd] = PENDING
            if kind is Load:
                self._request(cycle, READ, addr, tag=ins.rd)
            else:
                self._request(cycle, AMO_ADD, addr, regs[ins.rs], tag=ins.rd)
            st.pc += 1
            self._retire(st)
            return None

        if kind is Store:
            latest = max(ready[ins.base], ready[ins.rs])
            if latest > cycle:
                return self._stall(st, RAW_WAIT, latest if latest < PENDING else None)
            addr = (regs[ins.base] + ins.offset) & MASK32
            st.pending_stores += 1
            self._request(cycle, WRITE, addr, regs[ins.rs])
            st.pc += 1
            self._retire(st)
            return None

        if kind is Branch:
            if ready[ins.rs] > cycle:
                return self._stall(st, RAW_WAIT, ready[ins.rs] if ready[ins.rs] < PENDING else None)
            value = regs[ins.rs]
            taken = ins.kind == "j" or (ins.kind == "beqz") == (value == 0)
            st.pc = ins.target if taken else st.pc + 1
            self._retire(st)
            return None

        if kind is Barrier:
            if st.pending_stores:
                return self._stall(st, BARRIER_WAIT)
            gen = st.barrier_generation.get(ins.barrier_id, 0)
            st.barrier_generation[ins.barrier_id] = gen + 1
            self._cluster.barriers.arrive(ins.barrier_id, gen, st.core_id, cycle)
            st.waiting_barrier = (ins.barrier_id, gen)
            st.pc += 1
            self._retire(st)
            return None

        if kind is DmaStart:
            latest = max(ready[ins.src_reg], ready[ins.dst_reg])
            if latest > cycle:
                return self._stall(st, RAW_WAIT, latest if latest < PENDING else None)
            frontend = self._cluster.frontend
            if st.pending_stores:
                return self._stall(st, DMA_WAIT)
            if frontend.busy:
                return self._stall(st, DMA_WAIT, self._cluster.dma.next_event())
            desc = self.program.descriptors[ins.descriptor]
            if ins.src_reg or ins.dst_reg:
                desc = desc.model_copy(update={"src": desc.src + regs[ins.src_reg], "dst": desc.dst + regs[ins.dst_reg]})
            if not frontend.program(desc):
                raise DmaFault(
                    f"core {st.core_id} pc {st.pc}: DMA descriptor #{ins.descriptor} rejected (status 0x{frontend.read(STATUS):08x})"
                )
            st.descriptor_ids.append(frontend.current)
            st.pc += 1
            self._retire(st)
            return None

        if kind is DmaWait:
            if self._cluster.frontend.busy:
                return self._stall(st, DMA_WAIT, self._cluster.dma.next_event())
            st.pc += 1
            self._retire(st)
            return None

        raise DecodeFault(f"core {st.core_id} pc {st.pc}: cannot execute {ins!r}")
