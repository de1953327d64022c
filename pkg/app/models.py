from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.utils import GIB, is_power_of_two, log2_exact

Direction = Literal["hbm->l1", "l1->hbm"]
LatencyClass = Literal["tile", "subgroup", "group", "remote"]
Comparator = Literal[">", ">=", "<", "<=", "==", "!="]


class HbmConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    channels: int = 16
    peak_bytes_per_cycle: int = 1024
    avg_latency: int = 130
    latency_jitter: int = 0
    burst_bytes: int = 256
    capacity: int = 32 * GIB
    nominal_gbps: Optional[float] = None

    @model_validator(mode="after")
    def _check(self) -> "HbmConfig":
        if not is_power_of_two(self.channels):
            raise ValueError(f"hbm.channels={self.channels} is not a power of two")
        if self.peak_bytes_per_cycle < self.channels or self.peak_bytes_per_cycle % self.channels:
            raise ValueError(
                f"hbm.peak_bytes_per_cycle={self.peak_bytes_per_cycle} is not divisible by channels={self.channels}"
            )
        if not is_power_of_two(self.burst_bytes) or self.burst_bytes < 4:
            raise ValueError(f"hbm.burst_bytes={self.burst_bytes} is not a power of two")
        if not is_power_of_two(self.capacity):
            raise ValueError(f"hbm.capacity={self.capacity} is not a power of two")
        if self.avg_latency < 0 or self.latency_jitter < 0:
            raise ValueError("hbm latencies must be non-negative")
        if self.latency_jitter > self.avg_latency:
            raise ValueError("hbm.latency_jitter must not exceed hbm.avg_latency")
        # the scrambler swaps the channel-select field with the bits right above the burst offset
        if self.capacity // self.channels < self.burst_bytes * self.channels:
            raise ValueError("hbm.capacity too small to interleave channels at burst granularity")
        return self

    @property
    def per_channel_bytes_per_cycle(self) -> int:
        return self.peak_bytes_per_cycle // self.channels

    @property
    def burst_bits(self) -> int:
        return log2_exact(self.burst_bytes)

    @property
    def channel_bits(self) -> int:
        return log2_exact(self.channels)

    @property
    def native_channel_shift(self) -> int:
        return log2_exact(self.capacity // self.channels)


class ClusterConfig(BaseModel):
    """Topology, latencies, bank geometry and main-memory parameters of one run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "custom"
    cores_per_tile: int = 8
    tiles_per_subgroup: int = 8
    subgroups_per_group: int = 4
    groups: int = 4
    banks_per_tile: int = 32
    bank_words: int = 256
    latency_tile: int = 1
    latency_subgroup: int = 3
    latency_group: int = 5
    latency_remote: int = 9
    hbm: HbmConfig = Field(default_factory=HbmConfig)
    frequency_hz: float = 910e9 / 1024
    scoreboard_depth: int = 8
    dma_backends: Optional[int] = None
    dma_outstanding: int = 16
    deadlock_window: int = 1_000_000

    @model_validator(mode="after")
    def _check(self) -> "ClusterConfig":
        for key in ("cores_per_tile", "tiles_per_subgroup", "subgroups_per_group", "groups", "banks_per_tile", "bank_words"):
            value = getattr(self, key)
            if not is_power_of_two(value):
                raise ValueError(f"{key}={value} is not a power of two")
        if self.latency_tile < 1:
            raise ValueError("latency_tile must be at least 1 cycle")
        if not (self.latency_tile < self.latency_subgroup < self.latency_group < self.latency_remote):
            raise ValueError(
                "latencies must grow with hierarchy distance: "
                f"tile={self.latency_tile} subgroup={self.latency_subgroup} "
                f"group={self.latency_group} remote={self.latency_remote}"
            )
        if self.scoreboard_depth < 1:
            raise ValueError("scoreboard_depth must be at least 1")
        if self.dma_outstanding < 1:
            raise ValueError("dma_outstanding must be at least 1")
        if self.dma_backends is not None and (
            not is_power_of_two(self.dma_backends) or self.dma_backends > self.total_tiles
        ):
            raise ValueError(f"dma_backends={self.dma_backends} must be a power of two no larger than the tile count")
        if self.deadlock_window < 1:
            raise ValueError("deadlock_window must be positive")
        return self

    @property
    def total_tiles(self) -> int:
        return self.groups * self.subgroups_per_group * self.tiles_per_subgroup

    @property
    def total_cores(self) -> int:
        return self.total_tiles * self.cores_per_tile

    @property
    def total_banks(self) -> int:
        return self.total_tiles * self.banks_per_tile

    @property
    def l1_bytes(self) -> int:
        return self.total_banks * self.bank_words * 4

    @property
    def tiles_per_group(self) -> int:
        return self.subgroups_per_group * self.tiles_per_subgroup

    @property
    def tile_stripe_bytes(self) -> int:
        return self.banks_per_tile * 4

    @property
    def backends(self) -> int:
        return self.dma_backends or self.groups

    @property
    def variant(self) -> int:
        return self.latency_remote

    def tile_of_core(self, core_id: int) -> int:
        return core_id // self.cores_per_tile

    def subgroup_of_tile(self, tile: int) -> int:
        return tile // self.tiles_per_subgroup

    def group_of_tile(self, tile: int) -> int:
        return tile // self.tiles_per_group

    def tile_of_bank(self, bank: int) -> int:
        return bank // self.banks_per_tile

    def latency_class(self, core_tile: int, bank_tile: int) -> LatencyClass:
        if core_tile == bank_tile:
            return "tile"
        if self.subgroup_of_tile(core_tile) == self.subgroup_of_tile(bank_tile):
            return "subgroup"
        if self.group_of_tile(core_tile) == self.group_of_tile(bank_tile):
            return "group"
        return "remote"

    def latency_of_class(self, cls: LatencyClass) -> int:
        return getattr(self, f"latency_{cls}")

    def latency_between(self, core_tile: int, bank_tile: int) -> int:
        return self.latency_of_class(self.latency_class(core_tile, bank_tile))

    def with_variant(self, remote: int, frequency_hz: Optional[float] = None) -> "ClusterConfig":
        name = self.name
        if name.startswith("terapool-1-3-5-"):
            name = f"terapool-1-3-5-{remote}"
        update = {"latency_remote": remote, "name": name}
        if frequency_hz is not None:
            update["frequency_hz"] = frequency_hz
        return self.model_validate({**self.model_dump(), **update})


class BankLocation(BaseModel):
    model_config = ConfigDict(frozen=True)

    tile_index: int
    bank_in_tile: int
    word_offset: int


class WorkloadConfig(BaseModel):
    """PUSCH receive-chain dimensions."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_antennas: int = 64
    n_subcarriers: int = 3276
    n_beams: int = 32
    n_tx: int = 4
    fft_size: int = 4096
    n_symbols: int = 14
    noise_variance: float = 1e-3

    @model_validator(mode="after")
    def _check(self) -> "WorkloadConfig":
        if not is_power_of_two(self.fft_size) or self.fft_size < 2:
            raise ValueError(f"fft_size={self.fft_size} is not a power of two")
        if self.fft_size < self.n_subcarriers:
            raise ValueError(f"fft_size={self.fft_size} is smaller than n_subcarriers={self.n_subcarriers}")
        if not (1 <= self.n_tx <= self.n_beams <= self.n_antennas):
            raise ValueError(
                f"need 1 <= n_tx <= n_beams <= n_antennas, got {self.n_tx}, {self.n_beams}, {self.n_antennas}"
            )
        if self.n_subcarriers < 1 or self.n_symbols < 1:
            raise ValueError("n_subcarriers and n_symbols must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")
        return self


class DmaDescriptor(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    src: int
    dst: int
    bytes_per_row: int
    rows: int = 1
    src_stride: Optional[int] = None
    dst_stride: Optional[int] = None
    direction: Direction = "hbm->l1"

    @model_validator(mode="after")
    def _check(self) -> "DmaDescriptor":
        if self.rows < 1 or self.bytes_per_row < 1:
            raise ValueError("descriptor needs rows >= 1 and bytes_per_row >= 1")
        for key in ("src", "dst", "bytes_per_row", "src_stride", "dst_stride"):
            value = getattr(self, key)
            if value is not None and (value < 0 or value % 4):
                raise ValueError(f"{key}={value} is not word aligned")
        if self.row_src_stride < self.bytes_per_row or self.row_dst_stride < self.bytes_per_row:
            raise ValueError("strides must be at least bytes_per_row")
        return self

    @property
    def row_src_stride(self) -> int:
        return self.bytes_per_row if self.src_stride is None else self.src_stride

    @property
    def row_dst_stride(self) -> int:
        return self.bytes_per_row if self.dst_stride is None else self.dst_stride

    @property
    def total_bytes(self) -> int:
        return self.rows * self.bytes_per_row

    @property
    def hbm_side(self) -> int:
        return self.src if self.direction == "hbm->l1" else self.dst

    @property
    def l1_side(self) -> int:
        return self.dst if self.direction == "hbm->l1" else self.src


class DmaStatus(BaseModel):
    descriptor_id: int = 0
    bursts_total: int = 0
    bursts_done: int = 0
    busy: bool = False
    error: bool = False
    busy_error: bool = False
    completion_cycle: Optional[int] = None


class Expectation(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metric: str
    comparator: Comparator
    threshold: float
    kernel: Optional[str] = None
    note: str = ""


class ExpectationsFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_: Literal["clustersim.expectations/1"] = Field(alias="schema")
    checks: List[Expectation]


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = "desk-256"
    kernel: str = "fft"
    seed: int = 1
    variant: Optional[int] = None
    double_buffer: bool = True
    memory: Literal["hbm", "ideal"] = "hbm"
    workload: Dict[str, int | float] = Field(default_factory=dict)


class CheckRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    report: dict
    expectations: dict
