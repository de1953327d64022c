from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import AddressError
from app.models import ClusterConfig, HbmConfig
from app.sim.providers import MainMemoryModel
from app.utils import ceil_div, sha256_hex

logger = logging.getLogger(__name__)

PAGE_BYTES = 1 << 16
JITTER_TABLE_SIZE = 1 << 16


class HbmCapacityError(ValueError):
    """Access beyond the modeled main-memory capacity."""


class L1Store:
    """Word-interleaved L1. Storage is kept in address order, so bank b is the strided view words[b::banks]."""

    def __init__(self, cfg: ClusterConfig) -> None:
        self._cfg = cfg
        self.total_banks = cfg.total_banks
        self.size_bytes = cfg.l1_bytes
        self.words = np.zeros(cfg.total_banks * cfg.bank_words, dtype=np.uint32)

    def _index(self, addr: int, nbytes: int = 4) -> int:
        if addr % 4 or nbytes % 4:
            raise AddressError(f"L1 access 0x{addr:x}+{nbytes} is not word aligned")
        if addr < 0 or addr + nbytes > self.size_bytes:
            raise AddressError(f"L1 access 0x{addr:x}+{nbytes} outside {self.size_bytes} bytes")
        return addr >> 2

    def read_word(self, addr: int) -> int:
        return int(self.words[self._index(addr)])

    def write_word(self, addr: int, value: int) -> None:
        self.words[self._index(addr)] = value & 0xFFFFFFFF

    def read_block(self, addr: int, nbytes: int) -> bytes:
        i = self._index(addr, nbytes)
        return self.words[i : i + nbytes // 4].tobytes()

    def write_block(self, addr: int, data: bytes) -> None:
        i = self._index(addr, len(data))
        self.words[i : i + len(data) // 4] = np.frombuffer(data, dtype="<u4")

    def load_words(self, addr: int, words: Sequence[int] | np.ndarray) -> None:
        arr = np.asarray(words, dtype=np.int64).astype(np.uint32)
        i = self._index(addr, 4 * len(arr))
        self.words[i : i + len(arr)] = arr

    def dump_words(self, addr: int, count: int) -> np.ndarray:
        i = self._index(addr, 4 * count)
        return self.words[i : i + count].copy()

    def bank_view(self, bank: int) -> np.ndarray:
        return self.words[bank :: self.total_banks]

    def image(self) -> bytes:
        return self.words.tobytes()

    def digest(self) -> str:
        return sha256_hex(self.image())


class MainMemoryStore:
    """Sparse byte-addressable backing store for main memory (logical addresses)."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._pages: Dict[int, np.ndarray] = {}

    def _check(self, addr: int, nbytes: int) -> None:
        if addr < 0 or addr + nbytes > self.capacity:
            raise HbmCapacityError(f"main-memory access 0x{addr:x}+{nbytes} exceeds capacity {self.capacity}")

    def _spans(self, addr: int, nbytes: int) -> Iterable[Tuple[int, int, int, int]]:
        pos = 0
        while pos < nbytes:
            page, offset = divmod(addr + pos, PAGE_BYTES)
            chunk = min(PAGE_BYTES - offset, nbytes - pos)
            yield page, offset, pos, chunk
            pos += chunk

    def read(self, addr: int, nbytes: int) -> bytes:
        self._check(addr, nbytes)
        out = bytearray(nbytes)
        for page, offset, pos, chunk in self._spans(addr, nbytes):
            data = self._pages.get(page)
            if data is not None:
                out[pos : pos + chunk] = data[offset : offset + chunk].tobytes()
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        view = np.frombuffer(data, dtype=np.uint8)
        for page, offset, pos, chunk in self._spans(addr, len(data)):
            buf = self._pages.get(page)
            if buf is None:
                buf = np.zeros(PAGE_BYTES, dtype=np.uint8)
                self._pages[page] = buf
            buf[offset : offset + chunk] = view[pos : pos + chunk]

    def load_image(self, addr: int, data: bytes | str | Path) -> int:
        if not isinstance(data, (bytes, bytearray)):
            data = Path(data).read_bytes()
        self.write(addr, bytes(data))
        return len(data)

    def store_image(self, addr: int, nbytes: int, path: Optional[str | Path] = None) -> bytes:
        data = self.read(addr, nbytes)
        if path is not None:
            Path(path).write_bytes(data)
        return data

    def hexdump(self, addr: int, nbytes: int, width: int = 16) -> str:
        data = self.read(addr, nbytes)
        lines = []
        for i in range(0, len(data), width):
            chunk = data[i : i + width]
            hexpart = " ".join(f"{b:02x}" for b in chunk)
            text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
            lines.append(f"{addr + i:08x}: {hexpart:<{width * 3 - 1}}  |{text}|")
        return "\n".join(lines)


@dataclass(frozen=True)
class ScrambleMap:
    """Swap the channel-select field with the bits right above the burst offset.

    With the map enabled, burst-sized aligned blocks rotate over the channels. The map
    is an involution, so it is its own inverse.
    """

    burst_bits: int
    channel_bits: int
    native_shift: int
    capacity: int
    enabled: bool = True

    @classmethod
    def for_hbm(cls, hbm: HbmConfig, enabled: bool = True) -> "ScrambleMap":
        return cls(
            burst_bits=hbm.burst_bits,
            channel_bits=hbm.channel_bits,
            native_shift=hbm.native_channel_shift,
            capacity=hbm.capacity,
            enabled=enabled,
        )

    def scramble(self, addr: int) -> int:
        if not 0 <= addr < self.capacity:
            raise HbmCapacityError(f"address 0x{addr:x} outside main memory ({self.capacity} bytes)")
        if not self.enabled:
            return addr
        mask = (1 << self.channel_bits) - 1
        low = (addr >> self.burst_bits) & mask
        high = (addr >> self.native_shift) & mask
        addr &= ~((mask << self.burst_bits) | (mask << self.native_shift))
        return addr | (high << self.burst_bits) | (low << self.native_shift)

    def unscramble(self, addr: int) -> int:
        return self.scramble(addr)

    def channel_of_physical(self, phys: int) -> int:
        return (phys >> self.native_shift) & ((1 << self.channel_bits) - 1)

    def channel(self, addr: int) -> int:
        return self.channel_of_physical(self.scramble(addr))


def scramble(smap: ScrambleMap, addr: int) -> int:
    return smap.scramble(addr)


@dataclass
class HbmChannelState:
    busy_until: int = 0
    last_completion: int = 0
    bytes_served: int = 0
    in_flight: Deque[int] = field(default_factory=deque)

    def retire(self, cycle: int) -> None:
        while self.in_flight and self.in_flight[0] <= cycle:
            self.in_flight.popleft()


@dataclass(frozen=True)
class BurstRecord:
    issue_cycle: int
    service_end: int
    completion_cycle: int
    channel: int
    bytes: int
    direction: str
    descriptor: int


class HbmModel(MainMemoryModel):
    """Channel queues with a bandwidth term and an average latency plus seeded jitter."""

    def __init__(self, config: HbmConfig, seed: int = 0, scramble_enabled: bool = True) -> None:
        self._config = config
        self.scramble_map = ScrambleMap.for_hbm(config, enabled=scramble_enabled)
        self.store = MainMemoryStore(config.capacity)
        self.channels = [HbmChannelState() for _ in range(config.channels)]
        self._rate = config.per_channel_bytes_per_cycle
        self._next_key = 0
        if config.latency_jitter:
            rng = np.random.default_rng(seed)
            table = rng.integers(-config.latency_jitter, config.latency_jitter + 1, size=JITTER_TABLE_SIZE)
            self._jitter = [int(x) for x in table]
        else:
            self._jitter = None

    @property
    def config(self) -> HbmConfig:
        return self._config

    @property
    def peak_bytes_per_cycle(self) -> float:
        return float(self._config.peak_bytes_per_cycle)

    @property
    def model_name(self) -> str:
        return "hbm"

    def channel_of(self, addr: int) -> int:
        return self.scramble_map.channel(addr)

    def service_cycles(self, nbytes: int) -> int:
        return ceil_div(nbytes, self._rate)

    def jitter(self, key: int) -> int:
        if self._jitter is None:
            return 0
        return self._jitter[key % JITTER_TABLE_SIZE]

    def submit(self, cycle: int, channel: int, nbytes: int, hbm_addr: int, key: Optional[int] = None) -> Tuple[int, int]:
        if hbm_addr < 0 or hbm_addr + nbytes > self._config.capacity:
            raise HbmCapacityError(
                f"burst 0x{hbm_addr:x}+{nbytes} exceeds main-memory capacity {self._config.capacity}"
            )
        if key is None:
            key = self._next_key
            self._next_key += 1
        ch = self.channels[channel]
        start = max(cycle, ch.busy_until)
        ch.busy_until = start + self.service_cycles(nbytes)
        completion = max(ch.busy_until + self._config.avg_latency + self.jitter(key), ch.last_completion, cycle)
        ch.last_completion = completion
        ch.bytes_served += nbytes
        ch.retire(cycle)
        ch.in_flight.append(completion)
        return ch.busy_until, completion


class IdealMemory(MainMemoryModel):
    """Zero latency, unbounded bandwidth. Used for compute-only reference runs."""

    def __init__(self, config: HbmConfig, seed: int = 0, scramble_enabled: bool = True) -> None:
        self._config = config
        self.scramble_map = ScrambleMap.for_hbm(config, enabled=scramble_enabled)
        self.store = MainMemoryStore(config.capacity)

    @property
    def config(self) -> HbmConfig:
        return self._config

    @property
    def peak_bytes_per_cycle(self) -> float:
        return float("inf")

    @property
    def model_name(self) -> str:
        return "ideal"

    def channel_of(self, addr: int) -> int:
        return self.scramble_map.channel(addr)

    def submit(self, cycle: int, channel: int, nbytes: int, hbm_addr: int, key: Optional[int] = None) -> Tuple[int, int]:
        if hbm_addr < 0 or hbm_addr + nbytes > self._config.capacity:
            raise HbmCapacityError(
                f"burst 0x{hbm_addr:x}+{nbytes} exceeds main-memory capacity {self._config.capacity}"
            )
        return cycle, cycle


def make_main_memory(kind: str, config: HbmConfig, seed: int = 0, scramble_enabled: bool = True) -> MainMemoryModel:
    if kind == "hbm":
        return HbmModel(config, seed=seed, scramble_enabled=scramble_enabled)
    if kind == "ideal":
        return IdealMemory(config, seed=seed, scramble_enabled=scramble_enabled)
    raise ValueError(f"unknown main-memory model {kind!r}")


def hbm_sustained_bandwidth(trace: Sequence[BurstRecord], warmup: int = 0) -> float:
    """Bytes per cycle over the trace makespan, minus the first ``warmup`` cycles.

    Callers pass the average access latency as ``warmup``. The makespan is never
    shorter than the channel service window.
    """
    if not trace:
        raise ValueError("empty burst trace")
    start = min(r.issue_cycle for r in trace)
    end = max(r.completion_cycle for r in trace)
    service = max(r.service_end for r in trace) - start
    makespan = max(end - start - warmup, service)
    total = sum(r.bytes for r in trace)
    if makespan <= 0:
        return float(total)
    return total / makespan


def channel_loads(trace: Sequence[BurstRecord], channels: int) -> List[int]:
    loads = [0] * channels
    for r in trace:
        loads[r.channel] += r.bytes
    return loads
