from __future__ import annotations

import csv
import heapq
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, List, Optional, Set, TextIO, Tuple

from pydantic import ValidationError

from app.config import AddressError
from app.models import ClusterConfig, DmaDescriptor, DmaStatus
from app.sim.memory import BurstRecord, HbmCapacityError, L1Store, ScrambleMap
from app.sim.providers import MainMemoryModel

logger = logging.getLogger(__name__)

# frontend register block, byte offsets
SRC_LO = 0x00
SRC_HI = 0x04
DST_LO = 0x08
DST_HI = 0x0C
SIZE = 0x10
SRC_STRIDE = 0x14
DST_STRIDE = 0x18
ROWS = 0x1C
DIRECTION = 0x20
START = 0x24
STATUS = 0x28
BURSTS_TOTAL = 0x2C
BURSTS_DONE = 0x30

STATUS_BUSY = 1 << 0
STATUS_ERROR = 1 << 1
STATUS_BUSY_ERROR = 1 << 2

DIRECTIONS = ("hbm->l1", "l1->hbm")
_WRITABLE = (SRC_LO, SRC_HI, DST_LO, DST_HI, SIZE, SRC_STRIDE, DST_STRIDE, ROWS, DIRECTION, START)
_READABLE = _WRITABLE + (STATUS, BURSTS_TOTAL, BURSTS_DONE)


class DmaFault(RuntimeError):
    """Access to an undefined or read-only DMA register, or a rejected descriptor."""


@dataclass(slots=True)
class Burst:
    src: int
    dst: int
    bytes: int
    channel: int
    descriptor_id: int
    index: int
    direction: str
    uid: int = 0
    backend: int = -1
    issue_cycle: int = -1
    service_end: int = -1
    completion: int = -1
    data: Optional[bytes] = None

    @property
    def hbm_addr(self) -> int:
        return self.src if self.direction == "hbm->l1" else self.dst

    @property
    def l1_addr(self) -> int:
        return self.dst if self.direction == "hbm->l1" else self.src


def split(desc: DmaDescriptor, smap: ScrambleMap, cfg: ClusterConfig, descriptor_id: int = 0, uid_base: int = 0) -> List[Burst]:
    """Cut a 2D descriptor into bursts, row-major and address-ascending.

    A burst stays inside one burst-aligned main-memory block (hence one channel) and
    inside one L1 tile stripe.
    """
    burst_bytes = cfg.hbm.burst_bytes
    stripe = cfg.tile_stripe_bytes
    hbm_to_l1 = desc.direction == "hbm->l1"
    last_row = desc.rows - 1
    hbm_base, l1_base = (desc.src, desc.dst) if hbm_to_l1 else (desc.dst, desc.src)
    hbm_stride, l1_stride = (
        (desc.row_src_stride, desc.row_dst_stride) if hbm_to_l1 else (desc.row_dst_stride, desc.row_src_stride)
    )
    hbm_end = hbm_base + last_row * hbm_stride + desc.bytes_per_row
    l1_end = l1_base + last_row * l1_stride + desc.bytes_per_row
    if hbm_end > cfg.hbm.capacity:
        raise HbmCapacityError(f"descriptor reaches 0x{hbm_end:x}, beyond main-memory capacity {cfg.hbm.capacity}")
    if l1_end > cfg.l1_bytes:
        raise AddressError(f"descriptor reaches 0x{l1_end:x}, beyond L1 ({cfg.l1_bytes} bytes)")

    bursts: List[Burst] = []
    for row in range(desc.rows):
        src = desc.src + row * desc.row_src_stride
        dst = desc.dst + row * desc.row_dst_stride
        remaining = desc.bytes_per_row
        while remaining:
            hbm, l1 = (src, dst) if hbm_to_l1 else (dst, src)
            chunk = min(remaining, burst_bytes - hbm % burst_bytes, stripe - l1 % stripe)
            bursts.append(
                Burst(
                    src=src,
                    dst=dst,
                    bytes=chunk,
                    channel=smap.channel(hbm),
                    descriptor_id=descriptor_id,
                    index=len(bursts),
                    direction=desc.direction,
                    uid=uid_base + len(bursts),
                )
            )
            src += chunk
            dst += chunk
            remaining -= chunk
    return bursts


@dataclass
class DescriptorState:
    descriptor_id: int
    descriptor: Optional[DmaDescriptor]
    bursts_total: int
    submit_cycle: int
    bursts_done: int = 0
    completion_cycle: Optional[int] = None

    @property
    def busy(self) -> bool:
        return self.bursts_done < self.bursts_total


class DmaBackend:
    """One data mover. Keeps at most ``limit`` bursts whose channel service has not ended."""

    def __init__(self, index: int, limit: int) -> None:
        self.index = index
        self.limit = limit
        self.queue: Deque[Burst] = deque()
        self._service_ends: List[int] = []
        self.issued = 0

    @property
    def outstanding(self) -> int:
        return len(self._service_ends)

    def release(self, cycle: int) -> None:
        ends = self._service_ends
        while ends and ends[0] <= cycle:
            heapq.heappop(ends)

    def can_issue(self) -> bool:
        return bool(self.queue) and len(self._service_ends) < self.limit

    def track(self, service_end: int) -> None:
        heapq.heappush(self._service_ends, service_end)
        self.issued += 1

    def next_release(self) -> Optional[int]:
        return self._service_ends[0] if self._service_ends else None


class DmaEngine:
    """Midend (descriptor split) plus per-group backends moving bursts between main memory and L1."""

    def __init__(
        self,
        cfg: ClusterConfig,
        l1: L1Store,
        memory: MainMemoryModel,
        outstanding: Optional[int] = None,
        backends: Optional[int] = None,
    ) -> None:
        self._cfg = cfg
        self._l1 = l1
        self.memory = memory
        self.scramble_map: ScrambleMap = memory.scramble_map
        limit = outstanding if outstanding is not None else cfg.dma_outstanding
        count = backends if backends is not None else cfg.backends
        self.backends = [DmaBackend(i, limit) for i in range(count)]
        self._tiles = cfg.total_tiles
        self._stripe = cfg.tile_stripe_bytes
        self._nbanks = cfg.total_banks
        self._landing: List[Tuple[int, int, Burst]] = []
        self.descriptors: Dict[int, DescriptorState] = {}
        self._next_id = 1
        self._next_uid = 0
        self._active = 0
        self.now = 0
        self.trace: List[BurstRecord] = []
        self.bytes_moved = 0

    @property
    def busy(self) -> bool:
        return self._active > 0

    def backend_of(self, l1_addr: int) -> int:
        tile = ((l1_addr >> 2) % self._nbanks) // self._cfg.banks_per_tile
        return tile * len(self.backends) // self._tiles

    def launch(self, desc: Optional[DmaDescriptor], cycle: Optional[int] = None) -> int:
        """Split a descriptor and queue its bursts. ``None`` records an empty transfer."""
        cycle = self.now if cycle is None else cycle
        descriptor_id = self._next_id
        self._next_id += 1
        bursts = [] if desc is None else split(desc, self.scramble_map, self._cfg, descriptor_id, self._next_uid)
        self._next_uid += len(bursts)
        state = DescriptorState(descriptor_id, desc, len(bursts), cycle)
        self.descriptors[descriptor_id] = state
        if not bursts:
            state.completion_cycle = cycle
            return descriptor_id
        self._active += 1
        for burst in bursts:
            burst.backend = self.backend_of(burst.l1_addr)
            self.backends[burst.backend].queue.append(burst)
        logger.debug("descriptor %d: %d bursts, %d bytes", descriptor_id, len(bursts), desc.total_bytes)
        return descriptor_id

    def status(self, descriptor_id: int) -> DmaStatus:
        state = self.descriptors.get(descriptor_id)
        if state is None:
            return DmaStatus()
        return DmaStatus(
            descriptor_id=descriptor_id,
            bursts_total=state.bursts_total,
            bursts_done=state.bursts_done,
            busy=state.busy,
            completion_cycle=state.completion_cycle,
        )

    def _beat_free(self, l1_addr: int, nbytes: int, served: Set[int], used_tiles: Set[int]) -> Tuple[bool, int]:
        first = (l1_addr >> 2) % self._nbanks
        tile = first // self._cfg.banks_per_tile
        if tile in used_tiles:
            return False, tile
        if served and not served.isdisjoint(range(first, first + nbytes // 4)):
            return False, tile
        return True, tile

    def tick(self, cycle: int, served_banks: Optional[Set[int]] = None) -> List[Burst]:
        """Issue what the outstanding limits allow, then land due bursts into free tile slots.

        A beat uses its tile's port for the cycle and only banks no core was granted.
        """
        self.now = cycle
        served = served_banks or set()
        used_tiles: Set[int] = set()
        store = self.memory.store
        for backend in self.backends:
            backend.release(cycle)
            while backend.can_issue():
                burst = backend.queue[0]
                if burst.direction == "hbm->l1":
                    burst.data = store.read(burst.src, burst.bytes)
                else:
                    ok, tile = self._beat_free(burst.src, burst.bytes, served, used_tiles)
                    if not ok:
                        break
                    used_tiles.add(tile)
                    burst.data = self._l1.read_block(burst.src, burst.bytes)
                backend.queue.popleft()
                completion = self.memory.hbm_submit(cycle, burst.channel, burst)
                backend.track(burst.service_end)
                heapq.heappush(self._landing, (completion, burst.uid, burst))

        done: List[Burst] = []
        retry: List[Tuple[int, int, Burst]] = []
        landing = self._landing
        while landing and landing[0][0] <= cycle:
            item = heapq.heappop(landing)
            burst = item[2]
            if burst.direction == "hbm->l1":
                ok, tile = self._beat_free(burst.dst, burst.bytes, served, used_tiles)
                if not ok:
                    retry.append(item)
                    continue
                used_tiles.add(tile)
                self._l1.write_block(burst.dst, burst.data)
            else:
                store.write(burst.dst, burst.data)
            burst.data = None
            done.append(burst)
        for item in retry:
            heapq.heappush(landing, item)
        for burst in done:
            self._finish(burst, cycle)
        return done

    def _finish(self, burst: Burst, cycle: int) -> None:
        self.bytes_moved += burst.bytes
        self.trace.append(
            BurstRecord(
                issue_cycle=burst.issue_cycle,
                service_end=burst.service_end,
                completion_cycle=cycle,
                channel=burst.channel,
                bytes=burst.bytes,
                direction=burst.direction,
                descriptor=burst.descriptor_id,
            )
        )
        state = self.descriptors[burst.descriptor_id]
        state.bursts_done += 1
        if state.bursts_done == state.bursts_total:
            state.completion_cycle = cycle
            self._active -= 1
            logger.debug("descriptor %d done at cycle %d", state.descriptor_id, cycle)

    def idle(self) -> bool:
        return not self._landing and all(not b.queue and not b.outstanding for b in self.backends)

    def next_event(self) -> Optional[int]:
        """Earliest future cycle at which ticking can change state, if any work is pending."""
        if any(b.queue for b in self.backends):
            return self.now + 1
        cycles = [c for c in (b.next_release() for b in self.backends) if c is not None]
        if self._landing:
            cycles.append(self._landing[0][0])
        return max(min(cycles), self.now + 1) if cycles else None


def write_burst_trace(trace: List[BurstRecord], out: str | Path | TextIO) -> None:
    """CSV with one row per completed burst."""
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="", encoding="utf-8") as f:
            write_burst_trace(trace, f)
        return
    writer = csv.writer(out)
    writer.writerow(["cycle", "channel", "bytes", "direction", "descriptor", "completion"])
    for r in trace:
        writer.writerow([r.issue_cycle, r.channel, r.bytes, r.direction, r.descriptor, r.completion_cycle])


class DmaFrontend:
    """Memory-mapped configuration block. One descriptor in flight at a time."""

    def __init__(self, engine: DmaEngine) -> None:
        self._engine = engine
        self._regs: Dict[int, int] = {}
        self._written: Set[int] = set()
        self._error = False
        self._busy_error = False
        self._current: Optional[int] = None

    @property
    def current(self) -> Optional[int]:
        return self._current

    @property
    def busy(self) -> bool:
        if self._current is None:
            return False
        return self._engine.descriptors[self._current].busy

    def reset_staging(self) -> None:
        self._regs.clear()
        self._written.clear()

    def write(self, csr: int, value: int) -> None:
        if csr not in _WRITABLE:
            raise DmaFault(f"write to undefined or read-only DMA register 0x{csr:02x}")
        value &= 0xFFFFFFFF
        if csr == START:
            self._start()
            return
        self._regs[csr] = value
        self._written.add(csr)

    def read(self, csr: int) -> int:
        if csr not in _READABLE:
            raise DmaFault(f"read of undefined DMA register 0x{csr:02x}")
        if csr == STATUS:
            word = 0
            if self.busy:
                word |= STATUS_BUSY
            if self._error:
                word |= STATUS_ERROR
            if self._busy_error:
                word |= STATUS_BUSY_ERROR
            return word | ((self._current or 0) & 0xFFFF) << 16
        if csr == START:
            return self._current or 0
        if csr in (BURSTS_TOTAL, BURSTS_DONE):
            if self._current is None:
                return 0
            state = self._engine.descriptors[self._current]
            return state.bursts_total if csr == BURSTS_TOTAL else state.bursts_done
        return self._regs.get(csr, 0)

    def status(self) -> DmaStatus:
        if self._current is None:
            return DmaStatus(error=self._error, busy_error=self._busy_error)
        status = self._engine.status(self._current)
        return status.model_copy(update={"error": self._error, "busy_error": self._busy_error})

    def _start(self) -> bool:
        if self.busy:
            self._busy_error = True
            logger.debug("DMA start rejected: descriptor %s still busy", self._current)
            return False
        self._busy_error = False
        if not {SRC_LO, DST_LO, SIZE} <= self._written:
            self._error = True
            return False
        regs = self._regs
        size = regs[SIZE]
        rows = regs.get(ROWS, 1)
        if size == 0 or rows == 0:
            self._error = False
            self._current = self._engine.launch(None)
            return True
        direction = regs.get(DIRECTION, 0)
        if direction not in (0, 1):
            self._error = True
            return False
        try:
            desc = DmaDescriptor(
                src=regs.get(SRC_HI, 0) << 32 | regs[SRC_LO],
                dst=regs.get(DST_HI, 0) << 32 | regs[DST_LO],
                bytes_per_row=size,
                rows=rows,
                src_stride=regs.get(SRC_STRIDE),
                dst_stride=regs.get(DST_STRIDE),
                direction=DIRECTIONS[direction],
            )
            self._current = self._engine.launch(desc)
        except (ValidationError, AddressError, HbmCapacityError) as e:
            logger.warning("DMA start rejected: %s", e)
            self._error = True
            return False
        self._error = False
        return True

    def program(self, desc: DmaDescriptor) -> bool:
        """Stage every field of ``desc`` and write START. Returns whether it launched."""
        self.reset_staging()
        self.write(SRC_LO, desc.src & 0xFFFFFFFF)
        self.write(SRC_HI, desc.src >> 32)
        self.write(DST_LO, desc.dst & 0xFFFFFFFF)
        self.write(DST_HI, desc.dst >> 32)
        self.write(SIZE, desc.bytes_per_row)
        self.write(ROWS, desc.rows)
        self.write(SRC_STRIDE, desc.row_src_stride)
        self.write(DST_STRIDE, desc.row_dst_stride)
        self.write(DIRECTION, DIRECTIONS.index(desc.direction))
        return self._start()
