from __future__ import annotations

import cmath
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.config import ConfigError
from app.kernels.artifacts import KernelArtifacts, OutputRegion
from app.kernels.layout import L1Layout, PrivateTable
from app.kernels.workload import dequantize, quantize, random_signal
from app.models import ClusterConfig, WorkloadConfig
from app.sim.alu import cmul_q15, pack_complex, radix2_output, radix4_output
from app.sim.builder import ProgramBuilder
from app.sim.core import Instr
from app.utils import log2_exact

logger = logging.getLogger(__name__)

BUTTERFLY_OPS = {4: 34, 2: 10}
FFT_TOLERANCE = 2.0**-7
MAX_PAD_WORDS = 16

SET_STRIDE = 7
TEMP = 15
OUT = 18


def fft_radices(n: int) -> List[int]:
    """Radix-4 stages, plus one radix-2 stage last when log2(n) is odd."""
    bits = log2_exact(n)
    if bits < 1:
        raise ConfigError(f"fft size {n} too small")
    return [4] * (bits // 2) + [2] * (bits % 2)


def fft_op_count(n: int, antennas: int = 1) -> int:
    return antennas * sum(n // r * BUTTERFLY_OPS[r] for r in fft_radices(n))


def digit_position(index: int, n: int, radices: Sequence[int]) -> int:
    """Buffer position of input sample ``index`` before the first stage."""
    size = n
    pos = 0
    for r in reversed(radices):
        size //= r
        pos += (index % r) * size
        index //= r
    return pos


def input_order(n: int, radices: Sequence[int]) -> List[int]:
    """order[p] = input sample that the first stage reads at position p."""
    order = [0] * n
    for i in range(n):
        order[digit_position(i, n, radices)] = i
    return order


def twiddle_word(index: int, n: int) -> int:
    return pack_complex(cmath.exp(-2j * cmath.pi * index / n))


@dataclass(frozen=True)
class Butterfly:
    antenna: int
    base: int
    span: int
    radix: int
    twiddle_step: int

    def positions(self) -> List[int]:
        return [self.base + m * self.span for m in range(self.radix)]


@dataclass
class FftPlan:
    n: int
    antennas: int
    cores: int
    stride: int
    in_base: int = 0
    work_base: int = 0
    radices: List[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.radices:
            self.radices = fft_radices(self.n)

    @cached_property
    def order(self) -> List[int]:
        return input_order(self.n, self.radices)

    @property
    def stages(self) -> int:
        return len(self.radices)

    @cached_property
    def butterflies(self) -> List[List[Butterfly]]:
        return [self._stage(s) for s in range(self.stages)]

    def stage_butterflies(self, stage: int) -> List[Butterfly]:
        return self.butterflies[stage]

    def _stage(self, stage: int) -> List[Butterfly]:
        r = self.radices[stage]
        span = 1
        for prev in self.radices[:stage]:
            span *= prev
        length = span * r
        step = self.n // length
        out = []
        for a in range(self.antennas):
            for block in range(self.n // length):
                for k in range(span):
                    out.append(Butterfly(a, block * length + k, span, r, k * step))
        return out

    def core_butterflies(self, stage: int, core: int) -> List[Butterfly]:
        return self.stage_butterflies(stage)[core :: self.cores]

    def source_word(self, stage: int, bf: Butterfly, m: int) -> int:
        p = bf.base + m * bf.span
        if stage == 0:
            return (self.in_base >> 2) + bf.antenna * self.stride + self.order[p]
        return (self.work_base >> 2) + bf.antenna * self.stride + p

    def output_word(self, bf: Butterfly, q: int) -> int:
        return (self.work_base >> 2) + bf.antenna * self.stride + bf.base + q * bf.span


def fetch_conflicts(plan: FftPlan, total_banks: int) -> int:
    """Same-bank operand fetches among cores in lock-step.

    Fetches are grouped by (stage, butterfly step, operand slot); each extra fetch to
    an already used bank in a group counts once.
    """
    conflicts = 0
    for stage in range(plan.stages):
        bfs = plan.stage_butterflies(stage)
        for start in range(0, len(bfs), plan.cores):
            group = bfs[start : start + plan.cores]
            for m in range(plan.radices[stage]):
                banks = [plan.source_word(stage, bf, m) % total_banks for bf in group]
                conflicts += len(banks) - len(set(banks))
    return conflicts


def choose_stride(cfg: ClusterConfig, n: int, antennas: int, cores: int) -> tuple[int, int]:
    """Antenna stride (n + pad words) with the fewest fetch conflicts; the smallest pad wins ties."""
    best = None
    for pad in range(MAX_PAD_WORDS + 1):
        plan = FftPlan(n, antennas, cores, n + pad)
        conflicts = fetch_conflicts(plan, cfg.total_banks)
        if best is None or conflicts < best[1]:
            best = (n + pad, conflicts)
        if conflicts == 0:
            break
    assert best is not None
    if best[1]:
        logger.warning("no conflict-free antenna stride up to pad %d; using %d (%d conflicts)", MAX_PAD_WORDS, *best)
    return best


def twiddle_table(plan: FftPlan, layout: L1Layout, name: str = "fft.twiddles") -> PrivateTable:
    """Each core's distinct non-unit twiddles, keyed by twiddle index."""
    entries: List[Dict[int, int]] = []
    for core in range(plan.cores):
        seen: Dict[int, int] = {}
        for stage in range(plan.stages):
            for bf in plan.core_butterflies(stage, core):
                if bf.twiddle_step:
                    for m in range(1, bf.radix):
                        idx = m * bf.twiddle_step
                        if idx not in seen:
                            seen[idx] = twiddle_word(idx, plan.n)
        entries.append(seen)
    return PrivateTable(layout, name, entries)


def _emit_stage(b: ProgramBuilder, plan: FftPlan, stage: int, core: int, twiddles: PrivateTable) -> None:
    bfs = plan.core_butterflies(stage, core)
    r = plan.radices[stage]

    def load(bf: Butterfly, s: int) -> None:
        regs = 1 + SET_STRIDE * s
        for m in range(r):
            b.load(regs + m, 4 * plan.source_word(stage, bf, m))
        if bf.twiddle_step:
            for m in range(1, r):
                b.load(regs + 3 + m, twiddles.addr(core, m * bf.twiddle_step))

    def compute(bf: Butterfly, s: int) -> None:
        regs = 1 + SET_STRIDE * s
        unit = 0 if bf.twiddle_step else 1
        for m in range(1, r):
            b.op(TEMP + m - 1, "cmul_q15", regs + m, 0 if unit else regs + 3 + m, imm=unit)
        if r == 4:
            for q in range(4):
                b.op(OUT + q, "fft_r4_out", regs, TEMP, TEMP + 1, TEMP + 2, imm=q)
        else:
            for q in range(2):
                b.op(OUT + q, "fft_r2_out", regs, TEMP, imm=q)
        for q in range(r):
            b.store(OUT + q, 4 * plan.output_word(bf, q))

    if not bfs:
        return
    load(bfs[0], 0)
    for i, bf in enumerate(bfs):
        if i + 1 < len(bfs):
            load(bfs[i + 1], (i + 1) % 2)
        compute(bf, i % 2)


def emit_fft(
    builders: Sequence[ProgramBuilder],
    plan: FftPlan,
    twiddles: PrivateTable,
    barrier_id: int = 0,
    final_barrier: bool = True,
) -> None:
    """Stage by stage, butterfly g on core g mod cores, a cluster barrier after every stage.

    With ``final_barrier`` off the caller closes the last stage itself.
    """
    for stage in range(plan.stages):
        last = stage == plan.stages - 1
        for core, b in enumerate(builders):
            _emit_stage(b, plan, stage, core, twiddles)
            if final_barrier or not last:
                b.barrier(barrier_id)


def fft_reference(x: Sequence[int], n: int) -> List[int]:
    """Bit-exact model of the generated programs for one antenna; natural-order output."""
    radices = fft_radices(n)
    order = input_order(n, radices)
    buf = [int(x[order[p]]) for p in range(n)]
    span = 1
    for r in radices:
        length = span * r
        step = n // length
        for block in range(0, n, length):
            for k in range(span):
                pos = [block + k + m * span for m in range(r)]
                xs = [buf[p] for p in pos]
                ts = [xs[0]] + [xs[m] if k == 0 else cmul_q15(xs[m], twiddle_word(m * k * step, n)) for m in range(1, r)]
                if r == 4:
                    outs = [radix4_output(ts, q) for q in range(4)]
                else:
                    outs = [radix2_output(ts[0], ts[1], q) for q in range(2)]
                for p, y in zip(pos, outs):
                    buf[p] = y
        span = length
    return buf


def build_fft(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    seed: int = 1,
    impulse: bool = False,
    antennas: Optional[int] = None,
    cores: Optional[int] = None,
    signal: Optional[np.ndarray] = None,
) -> KernelArtifacts:
    n = w.fft_size
    nant = antennas or w.n_antennas
    ncores = cores or cfg.total_cores
    if ncores > cfg.total_cores:
        raise ConfigError(f"{ncores} cores requested on a {cfg.total_cores}-core cluster")
    stride, conflicts = choose_stride(cfg, n, nant, ncores)
    layout = L1Layout(cfg)
    inbuf = layout.shared("fft.in", nant * stride * 4)
    work = layout.shared("fft.work", nant * stride * 4)
    plan = FftPlan(n, nant, ncores, stride, inbuf.base, work.base)
    twiddles = twiddle_table(plan, layout)

    if signal is None:
        if impulse:
            signal = np.zeros((nant, n), dtype=np.complex128)
            signal[:, 0] = 0.5
        else:
            signal = random_signal(np.random.default_rng(seed), (nant, n))
    x_words = quantize(np.asarray(signal).reshape(nant, n))

    pool: Dict[Instr, Instr] = {}
    builders = [ProgramBuilder(f"fft/{c}", pool).mark("fft") for c in range(ncores)]
    emit_fft(builders, plan, twiddles)
    programs = [b.halt().build() for b in builders]

    l1_init: Dict[int, np.ndarray] = twiddles.image()
    for a in range(nant):
        l1_init[inbuf.base + 4 * a * stride] = x_words[a]

    expected = np.array([fft_reference(x_words[a], n) for a in range(nant)], dtype=np.uint32)
    oracle = np.fft.fft(dequantize(x_words), axis=1) / (1 << plan.stages)
    addrs = np.array(
        [work.base + 4 * (a * stride + k) for a in range(nant) for k in range(n)], dtype=np.int64
    )
    logger.debug("fft n=%d antennas=%d cores=%d stride=%d conflicts=%d", n, nant, ncores, stride, conflicts)
    return KernelArtifacts(
        name="fft",
        programs=programs,
        op_count=fft_op_count(n, nant),
        l1_init=l1_init,
        outputs=[
            OutputRegion("fft.out", addrs, expected.ravel(), oracle.ravel(), "q15c", FFT_TOLERANCE, "relative")
        ],
        layout=layout,
        info={"stride": stride, "pad": stride - n, "fetch_conflicts": conflicts, "stages": plan.stages},
    )
