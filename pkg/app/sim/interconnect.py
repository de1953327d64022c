from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import DefaultDict, Dict, Iterable, List, Optional, Set, TextIO

from app.config import latency_table
from app.models import ClusterConfig
from app.sim.memory import L1Store

logger = logging.getLogger(__name__)

READ = "read"
WRITE = "write"
AMO_ADD = "amo-add"


@dataclass(slots=True)
class MemRequest:
    req_id: int
    core_id: int
    op: str
    addr: int
    wdata: int = 0
    issue_cycle: int = 0
    tag: int = -1
    bank: int = -1


@dataclass(slots=True)
class MemResponse:
    req_id: int
    core_id: int
    op: str
    rdata: int
    deliver_cycle: int
    tag: int = -1


class Interconnect:
    """Tile / subgroup / group crossbars folded into one round-trip latency per level pair.

    Requests queue only at their bank. Every bank serves one request per cycle, picked
    by a per-bank round-robin pointer over core ids; a core's own requests to one bank
    stay in order. A request served at cycle s is delivered at s + latency.
    """

    def __init__(self, cfg: ClusterConfig, l1: L1Store, trace: Optional[TextIO] = None) -> None:
        self._cfg = cfg
        self._l1 = l1
        self._trace = trace
        self._ncores = cfg.total_cores
        self._nbanks = cfg.total_banks
        self._bank_mask = cfg.total_banks - 1
        self._banks_per_tile = cfg.banks_per_tile
        self._cores_per_tile = cfg.cores_per_tile
        self._latency = latency_table(cfg)
        self._words = l1.words
        self._nwords = len(l1.words)
        self._queues: DefaultDict[int, List[MemRequest]] = defaultdict(list)
        self._pointer = [0] * cfg.total_banks
        self._pending: DefaultDict[int, List[MemResponse]] = defaultdict(list)
        self._last_submit: Dict[int, int] = {}
        self._in_flight = 0
        self.served_banks: Set[int] = set()
        self.served_writes = 0
        self.served_total = 0
        self.submitted_total = 0

    @property
    def in_flight(self) -> int:
        return self._in_flight

    def idle(self) -> bool:
        return self._in_flight == 0

    def latency_of(self, core_id: int, addr: int) -> int:
        bank = (addr >> 2) & self._bank_mask
        return self._latency[core_id // self._cores_per_tile][bank // self._banks_per_tile]

    def submit(self, cycle: int, req: MemRequest) -> bool:
        assert self._last_submit.get(req.core_id) != cycle, f"core {req.core_id} issued twice in cycle {cycle}"
        assert req.addr % 4 == 0 and 0 <= (req.addr >> 2) < self._nwords, f"bad address 0x{req.addr:x}"
        self._last_submit[req.core_id] = cycle
        req.issue_cycle = cycle
        req.bank = (req.addr >> 2) & self._bank_mask
        self._queues[req.bank].append(req)
        self._in_flight += 1
        self.submitted_total += 1
        if self._trace is not None:
            self._trace.write(
                f"{cycle} REQ core={req.core_id} id={req.req_id} op={req.op} addr=0x{req.addr:08x} bank={req.bank}\n"
            )
        return True

    def arbitrate(self, bank: int, contenders: Iterable[MemRequest]) -> MemRequest:
        """First contender at or after the bank's pointer wins; the pointer moves past the winner."""
        ptr = self._pointer[bank]
        n = self._ncores
        best = None
        best_dist = n
        for req in contenders:
            dist = (req.core_id - ptr) % n
            if dist < best_dist:
                best, best_dist = req, dist
        assert best is not None, "arbitrate needs at least one contender"
        self._pointer[bank] = (best.core_id + 1) % n
        return best

    def _heads(self, queue: List[MemRequest]) -> List[MemRequest]:
        seen: Set[int] = set()
        heads = []
        for req in queue:
            if req.core_id not in seen:
                seen.add(req.core_id)
                heads.append(req)
        return heads

    def tick(self, cycle: int) -> List[MemResponse]:
        """Serve one request per busy bank and return the responses due at ``cycle + 1``."""
        served = self.served_banks = set()
        self.served_writes = 0
        if self._queues:
            words = self._words
            for bank in sorted(self._queues):
                queue = self._queues[bank]
                if len(queue) == 1:
                    req = queue.pop()
                    self._pointer[bank] = (req.core_id + 1) % self._ncores
                else:
                    req = self.arbitrate(bank, self._heads(queue))
                    del queue[next(i for i, r in enumerate(queue) if r is req)]
                if not queue:
                    del self._queues[bank]
                served.add(bank)
                index = req.addr >> 2
                old = int(words[index])
                if req.op == READ:
                    rdata = old
                elif req.op == WRITE:
                    words[index] = req.wdata & 0xFFFFFFFF
                    rdata = 0
                    self.served_writes += 1
                else:
                    words[index] = (old + req.wdata) & 0xFFFFFFFF
                    rdata = old
                    self.served_writes += 1
                lat = self._latency[req.core_id // self._cores_per_tile][bank // self._banks_per_tile]
                deliver = cycle + lat
                self._pending[deliver].append(
                    MemResponse(req.req_id, req.core_id, req.op, rdata, deliver, req.tag)
                )
            self.served_total += len(served)
        due = self._pending.pop(cycle + 1, None)
        if due is None:
            return []
        self._in_flight -= len(due)
        if self._trace is not None:
            for rsp in due:
                self._trace.write(f"{rsp.deliver_cycle} RSP id={rsp.req_id} core={rsp.core_id} data=0x{rsp.rdata:08x}\n")
        return due

    def next_delivery(self) -> Optional[int]:
        return min(self._pending) if self._pending else None

    def has_queued(self) -> bool:
        return bool(self._queues)
