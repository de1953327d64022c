from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import ConfigError
from app.models import ClusterConfig
from app.utils import ceil_div


class L1BudgetError(ConfigError):
    """The kernel's buffers do not fit in L1."""

    def __init__(self, required: int, available: int, what: str) -> None:
        super().__init__(f"L1 budget exceeded by {what}: layout needs {required} bytes, L1 has {available}")
        self.required = required
        self.available = available


@dataclass(frozen=True)
class SharedRegion:
    name: str
    base: int
    nbytes: int

    def word(self, index: int) -> int:
        return self.base + 4 * index


@dataclass(frozen=True)
class PrivateRegion:
    """Per-core words kept in the core's own slice of its tile's banks."""

    name: str
    top_row: int
    rows: int
    words_per_row: int
    total_banks: int
    banks_per_tile: int
    cores_per_tile: int

    @property
    def words_per_core(self) -> int:
        return self.rows * self.words_per_row

    def addr(self, core: int, index: int) -> int:
        if not 0 <= index < self.words_per_core:
            raise IndexError(f"{self.name}: word {index} outside {self.words_per_core} private words")
        tile, local = divmod(core, self.cores_per_tile)
        row = self.top_row - index // self.words_per_row
        bank = tile * self.banks_per_tile + local * self.words_per_row + index % self.words_per_row
        return (row * self.total_banks + bank) * 4


class L1Layout:
    """Row allocator over the word-interleaved L1.

    A row is one word in every bank. Shared buffers grow from row 0 upwards, per-core
    private regions from the last row downwards.
    """

    def __init__(self, cfg: ClusterConfig) -> None:
        self._cfg = cfg
        self.row_bytes = cfg.total_banks * 4
        self.rows = cfg.bank_words
        self._shared_rows = 0
        self._private_rows = 0
        self.shared_regions: Dict[str, SharedRegion] = {}
        self.private_regions: Dict[str, PrivateRegion] = {}

    @property
    def private_words_per_row(self) -> int:
        return self._cfg.banks_per_tile // self._cfg.cores_per_tile

    @property
    def used_bytes(self) -> int:
        return (self._shared_rows + self._private_rows) * self.row_bytes

    def _check(self, extra_rows: int, what: str) -> None:
        needed = self._shared_rows + self._private_rows + extra_rows
        if needed > self.rows:
            raise L1BudgetError(needed * self.row_bytes, self._cfg.l1_bytes, what)

    def shared(self, name: str, nbytes: int) -> SharedRegion:
        rows = ceil_div(nbytes, self.row_bytes)
        self._check(rows, name)
        region = SharedRegion(name, self._shared_rows * self.row_bytes, nbytes)
        self._shared_rows += rows
        self.shared_regions[name] = region
        return region

    def private(self, name: str, words_per_core: int) -> PrivateRegion:
        wpr = self.private_words_per_row
        if wpr < 1:
            raise ConfigError("private regions need at least one bank per core in each tile")
        rows = max(1, ceil_div(words_per_core, wpr))
        self._check(rows, name)
        top = self.rows - 1 - self._private_rows
        region = PrivateRegion(
            name,
            top,
            rows,
            wpr,
            self._cfg.total_banks,
            self._cfg.banks_per_tile,
            self._cfg.cores_per_tile,
        )
        self._private_rows += rows
        self.private_regions[name] = region
        return region

    def summary(self) -> List[Dict[str, int | str]]:
        out: List[Dict[str, int | str]] = [
            {"name": r.name, "kind": "shared", "base": r.base, "bytes": r.nbytes} for r in self.shared_regions.values()
        ]
        out += [
            {"name": r.name, "kind": "private", "base": r.addr(0, 0), "bytes": r.words_per_core * 4}
            for r in self.private_regions.values()
        ]
        return out


class PrivateTable:
    """Per-core constants deduplicated by key and stored in private banks.

    ``entries[core]`` maps a key to the word value that core needs; keys keep their
    insertion order as slot order.
    """

    def __init__(self, layout: L1Layout, name: str, entries: Sequence[Dict[Hashable, int]]) -> None:
        self._slots: List[Dict[Hashable, int]] = [{k: i for i, k in enumerate(e)} for e in entries]
        self._entries = entries
        self.region = layout.private(name, max((len(e) for e in entries), default=0))

    def addr(self, core: int, key: Hashable) -> int:
        return self.region.addr(core, self._slots[core][key])

    def image(self) -> Dict[int, np.ndarray]:
        out: Dict[int, np.ndarray] = {}
        for core, entries in enumerate(self._entries):
            for key, value in entries.items():
                out[self.addr(core, key)] = np.array([value], dtype=np.uint32)
        return out


@dataclass(frozen=True)
class MatrixView:
    """Row-major word matrix in L1: element (row, col) at base + 4 * (row * stride + cols[col]).

    ``cols`` remaps column indices (e.g. subcarrier to FFT bin); None is the identity.
    """

    base: int
    stride: int
    cols: Optional[Tuple[int, ...]] = None

    def addr(self, row: int, col: int) -> int:
        c = col if self.cols is None else self.cols[col]
        return self.base + 4 * (row * self.stride + c)

    def gather(self, words: np.ndarray, rows: int, ncols: int) -> np.ndarray:
        """rows x ncols block of a flat L1 word image seen through this view."""
        idx = np.array([[self.addr(r, c) >> 2 for c in range(ncols)] for r in range(rows)], dtype=np.int64)
        return words[idx]
