from __future__ import annotations

from typing import Dict, List, Optional, Tuple

from app.models import DmaDescriptor
from app.sim.core import (
    AmoAdd,
    Barrier,
    Branch,
    Compute,
    DmaStart,
    DmaWait,
    Halt,
    Instr,
    Load,
    Mark,
    Program,
    Store,
    compute,
)


class ProgramBuilder:
    """Append-only assembler for one core.

    Identical instructions are shared through ``pool`` so fully unrolled programs for
    many cores stay small in memory. Pass the same pool to every builder of one kernel.
    """

    def __init__(self, name: str = "", pool: Optional[Dict[Instr, Instr]] = None) -> None:
        self.name = name
        self._pool = pool if pool is not None else {}
        self._instrs: List[Instr] = []
        self._descriptors: List[DmaDescriptor] = []
        self._labels: Dict[str, int] = {}
        self._fixups: List[Tuple[int, str, str, int]] = []

    def __len__(self) -> int:
        return len(self._instrs)

    def emit(self, instr: Instr) -> "ProgramBuilder":
        self._instrs.append(self._pool.setdefault(instr, instr))
        return self

    def load(self, rd: int, offset: int, base: int = 0) -> "ProgramBuilder":
        return self.emit(Load(rd, offset, base))

    def store(self, rs: int, offset: int, base: int = 0) -> "ProgramBuilder":
        return self.emit(Store(rs, offset, base))

    def amo_add(self, rd: int, offset: int, rs: int, base: int = 0) -> "ProgramBuilder":
        return self.emit(AmoAdd(rd, offset, base, rs))

    def op(self, dst: int, fn: str, *srcs: int, imm: int = 0) -> "ProgramBuilder":
        return self.emit(compute(dst, tuple(srcs), fn, imm))

    def raw_compute(self, dst: int, srcs: Tuple[int, ...], fn: str, imm: int, op_count: int, latency: int) -> "ProgramBuilder":
        return self.emit(Compute(dst, tuple(srcs), fn, imm, op_count, latency))

    def li(self, rd: int, value: int) -> "ProgramBuilder":
        return self.op(rd, "li", imm=value)

    def barrier(self, barrier_id: int) -> "ProgramBuilder":
        return self.emit(Barrier(barrier_id))

    def descriptor(self, desc: DmaDescriptor) -> int:
        try:
            return self._descriptors.index(desc)
        except ValueError:
            self._descriptors.append(desc)
            return len(self._descriptors) - 1

    def dma_start(self, desc: DmaDescriptor, src_reg: int = 0, dst_reg: int = 0) -> "ProgramBuilder":
        return self.emit(DmaStart(self.descriptor(desc), src_reg, dst_reg))

    def dma_start_index(self, index: int, src_reg: int = 0, dst_reg: int = 0) -> "ProgramBuilder":
        return self.emit(DmaStart(index, src_reg, dst_reg))

    def dma_wait(self) -> "ProgramBuilder":
        return self.emit(DmaWait())

    def mark(self, label: str) -> "ProgramBuilder":
        return self.emit(Mark(label))

    def label(self, name: str) -> "ProgramBuilder":
        if name in self._labels:
            raise ValueError(f"label {name!r} defined twice")
        self._labels[name] = len(self._instrs)
        return self

    def branch(self, kind: str, rs: int, target: str) -> "ProgramBuilder":
        self._fixups.append((len(self._instrs), kind, target, rs))
        self._instrs.append(Branch(kind, rs, -1))
        return self

    def halt(self) -> "ProgramBuilder":
        return self.emit(Halt())

    def build(self) -> Program:
        instrs = list(self._instrs)
        for pc, kind, target, rs in self._fixups:
            if target not in self._labels:
                raise ValueError(f"branch to undefined label {target!r}")
            resolved = Branch(kind, rs, self._labels[target])
            instrs[pc] = self._pool.setdefault(resolved, resolved)
        return Program(instrs=instrs, descriptors=list(self._descriptors), labels=dict(self._labels), name=self.name)
