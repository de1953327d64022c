from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import DefaultDict, Dict, List, Optional, Set

from app.models import ClusterConfig, DmaDescriptor
from app.sim.builder import ProgramBuilder
from app.sim.core import Instr, Program
from app.sim.dma import DmaEngine
from app.sim.interconnect import READ, Interconnect, MemRequest
from app.sim.memory import BurstRecord, L1Store, channel_loads, hbm_sustained_bandwidth, make_main_memory
from app.utils import KIB, MIB

logger = logging.getLogger(__name__)

BENCHMARKS = ("l1-stream", "hammer", "remote", "local", "compute")


@dataclass
class BenchCase:
    name: str
    programs: List[Program]
    active_cores: int
    l1_image: Dict[int, List[int]] = field(default_factory=dict)


def word_address(cfg: ClusterConfig, bank: int, offset: int) -> int:
    return (offset * cfg.total_banks + bank) * 4


def latency_scan(cfg: ClusterConfig, rounds: Optional[int] = None) -> Dict[str, Set[int]]:
    """Observed round trips per latency class.

    In round k core c reads bank (c + k) mod banks, so one round never has two cores on
    one bank; ``banks`` rounds cover every (core, bank) pair.
    """
    if cfg.total_cores > cfg.total_banks:
        raise ValueError("latency scan needs at least one bank per core")
    ic = Interconnect(cfg, L1Store(cfg))
    nbanks = cfg.total_banks
    observed: DefaultDict[str, Set[int]] = defaultdict(set)
    cycle = 0
    for k in range(nbanks if rounds is None else rounds):
        start = cycle
        classes = {}
        for c in range(cfg.total_cores):
            bank = (c + k) % nbanks
            classes[c] = cfg.latency_class(cfg.tile_of_core(c), cfg.tile_of_bank(bank))
            ic.submit(start, MemRequest(c, c, READ, bank * 4))
        left = cfg.total_cores
        while left:
            for rsp in ic.tick(cycle):
                observed[classes[rsp.core_id]].add(rsp.deliver_cycle - start)
                left -= 1
            cycle += 1
    return dict(observed)


def l1_stream(cfg: ClusterConfig, loads_per_core: int = 64) -> BenchCase:
    """Every core reads its own slice of its tile's banks, one load per cycle."""
    per_core = cfg.banks_per_tile // cfg.cores_per_tile
    pool: Dict[Instr, Instr] = {}
    programs = []
    for c in range(cfg.total_cores):
        tile, local = divmod(c, cfg.cores_per_tile)
        b = ProgramBuilder(f"l1-stream/{c}", pool).mark("l1-stream")
        for j in range(loads_per_core):
            bank = tile * cfg.banks_per_tile + local * per_core + j % per_core
            b.load(1 + j % 8, word_address(cfg, bank, (j // per_core) % cfg.bank_words))
        programs.append(b.halt().build())
    return BenchCase("l1-stream", programs, cfg.total_cores)


def _chain(name: str, cfg: ClusterConfig, cores: List[int], banks: List[int], loads: int) -> BenchCase:
    pool: Dict[Instr, Instr] = {}
    programs: List[Program] = [Program() for _ in range(max(cores) + 1)]
    image: Dict[int, List[int]] = {}
    for c, bank in zip(cores, banks):
        addr = word_address(cfg, bank, 1)
        image[addr] = [addr]
        b = ProgramBuilder(f"{name}/{c}", pool).mark(name).li(1, addr)
        for _ in range(loads):
            b.load(1, 0, 1)
        programs[c] = b.halt().build()
    return BenchCase(name, programs, len(cores), image)


def bank_hammer(cfg: ClusterConfig, contenders: int = 8, loads: int = 64) -> BenchCase:
    """``contenders`` cores run dependent load chains on one tile-local bank.

    The word at the target address holds its own address, so every load feeds the next.
    """
    if contenders > cfg.total_cores:
        raise ValueError(f"{contenders} contenders on a {cfg.total_cores}-core cluster")
    return _chain("hammer", cfg, list(range(contenders)), [0] * contenders, loads)


def remote_chain(cfg: ClusterConfig, loads: int = 32) -> BenchCase:
    """Dependent loads to a conflict-free bank half the cluster away (another group)."""
    tiles = cfg.total_tiles
    per_core = cfg.banks_per_tile // cfg.cores_per_tile
    cores, banks = [], []
    for c in range(cfg.total_cores):
        tile, local = divmod(c, cfg.cores_per_tile)
        target = (tile + tiles // 2) % tiles
        cores.append(c)
        banks.append(target * cfg.banks_per_tile + local * per_core)
    return _chain("remote", cfg, cores, banks, loads)


def local_chain(cfg: ClusterConfig, loads: int = 32) -> BenchCase:
    per_core = cfg.banks_per_tile // cfg.cores_per_tile
    cores = list(range(cfg.total_cores))
    banks = [
        (c // cfg.cores_per_tile) * cfg.banks_per_tile + (c % cfg.cores_per_tile) * per_core for c in cores
    ]
    return _chain("local", cfg, cores, banks, loads)


def compute_micro(cfg: ClusterConfig, count: int = 64, cores: Optional[int] = None) -> BenchCase:
    n = cfg.total_cores if cores is None else cores
    pool: Dict[Instr, Instr] = {}
    programs = []
    for c in range(n):
        b = ProgramBuilder(f"compute/{c}", pool).mark("compute")
        for i in range(count):
            b.op(1 + i % 30, "addi", 0, imm=i)
        programs.append(b.halt().build())
    return BenchCase("compute", programs, n)


def build_bench(name: str, cfg: ClusterConfig, **kwargs) -> BenchCase:
    builders = {
        "l1-stream": l1_stream,
        "hammer": bank_hammer,
        "remote": remote_chain,
        "local": local_chain,
        "compute": compute_micro,
    }
    if name not in builders:
        raise ValueError(f"unknown benchmark {name!r}")
    return builders[name](cfg, **kwargs)


@dataclass
class StreamResult:
    bytes: int
    cycles: int
    sustained_bytes_per_cycle: float
    peak_bytes_per_cycle: float
    channel_bytes: List[int]
    trace: List[BurstRecord]

    @property
    def efficiency(self) -> float:
        return self.sustained_bytes_per_cycle / self.peak_bytes_per_cycle


def hbm_stream(
    cfg: ClusterConfig,
    total_bytes: int = 16 * MIB,
    scramble: bool = True,
    seed: int = 0,
    chunk: int = 64 * KIB,
) -> StreamResult:
    """Stream ``total_bytes`` of main memory into a rotating L1 window through the midend."""
    memory = make_main_memory("hbm", cfg.hbm, seed=seed, scramble_enabled=scramble)
    dma = DmaEngine(cfg, L1Store(cfg), memory)
    chunk = min(chunk, cfg.l1_bytes)
    for offset in range(0, total_bytes, chunk):
        size = min(chunk, total_bytes - offset)
        dma.launch(DmaDescriptor(src=offset, dst=offset % cfg.l1_bytes, bytes_per_row=size), cycle=0)
    cycle = 0
    while dma.busy:
        dma.tick(cycle)
        nxt = dma.next_event()
        cycle = cycle + 1 if nxt is None else nxt
    sustained = hbm_sustained_bandwidth(dma.trace, cfg.hbm.avg_latency)
    logger.info(
        "stream %d bytes: %.1f B/cycle of %d peak (scramble=%s)",
        total_bytes,
        sustained,
        cfg.hbm.peak_bytes_per_cycle,
        scramble,
    )
    return StreamResult(
        bytes=total_bytes,
        cycles=cycle,
        sustained_bytes_per_cycle=sustained,
        peak_bytes_per_cycle=float(cfg.hbm.peak_bytes_per_cycle),
        channel_bytes=channel_loads(dma.trace, cfg.hbm.channels),
        trace=dma.trace,
    )
