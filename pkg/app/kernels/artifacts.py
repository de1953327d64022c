from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from app.kernels.layout import L1Layout
from app.sim.alu import from_q20, unpack_complex
from app.sim.cluster import Cluster, RunResult
from app.sim.core import Program

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"CSTN"
TENSOR_FORMATS = {"q15c": 1, "q20": 2, "u32": 3}


@dataclass
class OutputRegion:
    """Words a kernel must produce, with the bit-exact reference and the float oracle.

    ``addrs`` lists byte addresses (L1 or main memory per ``space``). ``q15c`` regions
    decode one complex per word; ``q20c`` regions decode (re, im) word pairs.
    """

    name: str
    addrs: np.ndarray
    expected: np.ndarray
    oracle: Optional[np.ndarray] = None
    fmt: Literal["q15c", "q20c", "u32"] = "q15c"
    tolerance: float = 0.0
    metric: Literal["relative", "absolute"] = "relative"
    space: Literal["l1", "hbm"] = "l1"
    mask: Optional[np.ndarray] = None


@dataclass
class RegionCheck:
    name: str
    words: int
    mismatches: int
    error: Optional[float]
    tolerance: float
    passed: bool


@dataclass
class VerifyResult:
    checks: List[RegionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def mismatches(self) -> int:
        return sum(c.mismatches for c in self.checks)

    @property
    def max_error(self) -> float:
        errors = [c.error for c in self.checks if c.error is not None]
        return max(errors) if errors else 0.0


@dataclass
class KernelArtifacts:
    name: str
    programs: List[Program]
    op_count: int
    l1_init: Dict[int, np.ndarray] = field(default_factory=dict)
    hbm_init: Dict[int, bytes] = field(default_factory=dict)
    outputs: List[OutputRegion] = field(default_factory=list)
    layout: Optional[L1Layout] = None
    info: Dict[str, float | int | str] = field(default_factory=dict)

    def install(self, cluster: Cluster) -> None:
        for addr, words in self.l1_init.items():
            cluster.l1.load_words(addr, words)
        for addr, data in self.hbm_init.items():
            cluster.memory.store.write(addr, data)

    def run(self, cluster: Cluster) -> RunResult:
        self.install(cluster)
        return cluster.run(self.programs)


def read_words(result: RunResult, region: OutputRegion) -> np.ndarray:
    if region.space == "l1":
        return result.l1.words[np.asarray(region.addrs, dtype=np.int64) >> 2].astype(np.uint32)
    store = result.memory.store
    out = np.empty(len(region.addrs), dtype=np.uint32)
    addrs = np.asarray(region.addrs, dtype=np.int64)
    if len(addrs) and np.all(np.diff(addrs) == 4):
        return np.frombuffer(store.read(int(addrs[0]), 4 * len(addrs)), dtype="<u4").copy()
    for i, a in enumerate(addrs):
        out[i] = int.from_bytes(store.read(int(a), 4), "little")
    return out


def decode(words: np.ndarray, fmt: str) -> np.ndarray:
    if fmt == "q15c":
        return np.array([unpack_complex(int(w)) for w in words], dtype=np.complex128)
    if fmt == "q20c":
        vals = np.array([from_q20(int(w)) for w in words])
        return vals[0::2] + 1j * vals[1::2]
    return words.astype(np.float64)


def region_error(values: np.ndarray, oracle: np.ndarray, metric: str, mask: Optional[np.ndarray] = None) -> float:
    if mask is not None:
        values, oracle = values[mask], oracle[mask]
    if not len(oracle):
        return 0.0
    diff = float(np.max(np.abs(values - oracle)))
    if metric == "absolute":
        return diff
    scale = float(np.max(np.abs(oracle)))
    return diff / scale if scale else diff


def verify(artifacts: KernelArtifacts, result: RunResult) -> VerifyResult:
    """Compare every output region bit for bit with its reference and numerically with its oracle."""
    checks = []
    for region in artifacts.outputs:
        words = read_words(result, region)
        mismatches = int(np.count_nonzero(words != region.expected.astype(np.uint32)))
        error = None
        passed = mismatches == 0
        if region.oracle is not None:
            error = region_error(decode(words, region.fmt), region.oracle, region.metric, region.mask)
            passed = passed and error <= region.tolerance
        if not passed:
            logger.warning("%s: %d mismatching words, error %s (tolerance %g)", region.name, mismatches, error, region.tolerance)
        checks.append(RegionCheck(region.name, len(words), mismatches, error, region.tolerance, passed))
    return VerifyResult(checks)


def write_tensor(path: str | Path, words: Sequence[int] | np.ndarray, dims: Sequence[int], fmt: str = "q15c") -> None:
    """Raw little-endian words behind a small header: magic, format tag, rank, dims."""
    header = TENSOR_MAGIC + np.array([TENSOR_FORMATS[fmt], len(dims), *dims], dtype="<u4").tobytes()
    Path(path).write_bytes(header + np.asarray(words, dtype="<u4").tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, List[int], str]:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    tag, rank = np.frombuffer(data[4:12], dtype="<u4")
    dims = [int(d) for d in np.frombuffer(data[12 : 12 + 4 * int(rank)], dtype="<u4")]
    fmt = {v: k for k, v in TENSOR_FORMATS.items()}[int(tag)]
    words = np.frombuffer(data[12 + 4 * int(rank) :], dtype="<u4").copy()
    return words, dims, fmt
