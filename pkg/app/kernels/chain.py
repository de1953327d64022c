from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO

import numpy as np

from app.config import ConfigError
from app.kernels.artifacts import KernelArtifacts, OutputRegion, VerifyResult, verify
from app.kernels.beamforming import BF_TOLERANCE, bf_op_count, bf_reference, emit_bf, weight_table
from app.kernels.chest import chest_op_count, chest_reference, emit_chest, estimate_channel, h_index, pilot_table
from app.kernels.fft import (
    FFT_TOLERANCE,
    FftPlan,
    choose_stride,
    emit_fft,
    fft_op_count,
    fft_radices,
    fft_reference,
    twiddle_table,
)
from app.kernels.layout import L1Layout, MatrixView
from app.kernels.mmse import MAX_TX, MMSE_TOLERANCE, emit_mmse, mmse_op_count, mmse_reference, mmse_solve, output_regions
from app.kernels.workload import (
    check_pilots,
    dequantize,
    dft_beams,
    quantize,
    subcarrier_bins,
    time_domain,
    uplink_scenario,
)
from app.metrics import MetricsCalculator, MetricsReport
from app.models import ClusterConfig, DmaDescriptor, WorkloadConfig
from app.sim.builder import ProgramBuilder
from app.sim.cluster import Cluster, RunResult
from app.sim.core import Instr
from app.utils import ceil_div

logger = logging.getLogger(__name__)

CHAIN_TOLERANCE = FFT_TOLERANCE + 2 * BF_TOLERANCE + MMSE_TOLERANCE


@dataclass
class ChainArtifacts(KernelArtifacts):
    """Programs and images of the whole slot. Per-kernel op totals sit in ``kernel_ops``."""

    kernel_ops: Dict[str, int] = field(default_factory=dict)
    phases: int = 0
    double_buffer: bool = True


def chain_op_counts(w: WorkloadConfig) -> Dict[str, int]:
    data = w.n_symbols - 1
    return {
        "fft": w.n_symbols * fft_op_count(w.fft_size, w.n_antennas),
        "bf": w.n_symbols * bf_op_count(w.n_beams, w.n_antennas, w.n_subcarriers),
        "chest": chest_op_count(w.n_subcarriers, w.n_beams, w.n_tx),
        "mmse": data * w.n_subcarriers * mmse_op_count(w.n_tx, w.n_beams),
    }


def latency_hiding_bound(cfg: ClusterConfig, phases: int) -> int:
    """One main-memory pipeline fill per kernel phase: latency, worst jitter and one burst of service."""
    hbm = cfg.hbm
    fill = hbm.avg_latency + hbm.latency_jitter + ceil_div(hbm.burst_bytes, hbm.per_channel_bytes_per_cycle)
    return phases * fill


def _check_workload(w: WorkloadConfig) -> None:
    if w.n_symbols < 2:
        raise ConfigError(f"the chain needs a DMRS symbol and at least one data symbol, got n_symbols={w.n_symbols}")
    if w.n_tx > MAX_TX:
        raise ConfigError(f"MMSE supports at most {MAX_TX} layers, got n_tx={w.n_tx}")


def build_chain(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    double_buffer: bool = True,
    seed: int = 1,
    cores: Optional[int] = None,
) -> ChainArtifacts:
    """FFT, beamforming and channel estimation on the DMRS symbol; FFT, beamforming and MMSE on the rest.

    Antenna samples start in main memory and equalized symbols end there. Core 0
    drives the DMA; every kernel phase ends at a cluster barrier.
    """
    _check_workload(w)
    A, N, S, nb, T = w.n_antennas, w.fft_size, w.n_subcarriers, w.n_beams, w.n_tx
    ncores = cores or cfg.total_cores
    if ncores > cfg.total_cores:
        raise ConfigError(f"{ncores} cores requested on a {cfg.total_cores}-core cluster")
    rng = np.random.default_rng(seed)
    scenario = uplink_scenario(w, rng)

    stride, conflicts = choose_stride(cfg, N, A, ncores)
    layout = L1Layout(cfg)
    inbufs = [layout.shared(f"chain.in{i}", A * stride * 4) for i in range(2)]
    work = layout.shared("chain.work", A * stride * 4)
    bbuf = layout.shared("chain.beams", nb * S * 4)
    hbuf = layout.shared("chain.h", S * nb * T * 4)
    obuf = layout.shared("chain.out", S * (2 * T + 1) * 4)
    plans = [FftPlan(N, A, ncores, stride, buf.base, work.base) for buf in inbufs]
    twiddles = twiddle_table(plans[0], layout)
    w_words = quantize(dft_beams(nb, A))
    weights = weight_table(layout, w_words, ncores, S)
    p_words = quantize(scenario.pilots)
    check_pilots(p_words)
    pilots = pilot_table(layout, p_words, w, ncores)

    stages = plans[0].stages
    x_words = quantize(time_domain(scenario.freq, w, stages))
    symbol_bytes = A * N * 4
    out_bytes = S * (2 * T + 1) * 4
    out_hbm = w.n_symbols * symbol_bytes
    hbm_init = {s * symbol_bytes: x_words[s].astype("<u4").tobytes() for s in range(w.n_symbols)}

    def dma_in(s: int) -> DmaDescriptor:
        return DmaDescriptor(
            src=s * symbol_bytes,
            dst=inbufs[s % 2].base,
            bytes_per_row=N * 4,
            rows=A,
            src_stride=N * 4,
            dst_stride=stride * 4,
        )

    def dma_out(s: int) -> DmaDescriptor:
        return DmaDescriptor(
            src=obuf.base,
            dst=out_hbm + (s - 1) * out_bytes,
            bytes_per_row=out_bytes,
            direction="l1->hbm",
        )

    bins = tuple(int(b) for b in subcarrier_bins(w))
    spectrum = MatrixView(work.base, stride, bins)
    beams = MatrixView(bbuf.base, S)

    def h_addr(sc: int, beam: int, t: int) -> int:
        return hbuf.base + 4 * h_index(sc, beam, t, nb, T)

    pool: Dict[Instr, Instr] = {}
    builders = [ProgramBuilder(f"chain/{c}", pool) for c in range(ncores)]
    lead = builders[0]

    def phase(label: str) -> None:
        for b in builders:
            b.mark(label)

    def barrier() -> None:
        for b in builders:
            b.barrier(0)

    def transfer(desc: DmaDescriptor) -> None:
        phase("dma")
        lead.dma_start(desc).dma_wait()
        barrier()

    last = w.n_symbols - 1
    if double_buffer:
        transfer(dma_in(0))
    for s in range(w.n_symbols):
        if not double_buffer:
            transfer(dma_in(s))
        phase("fft")
        if double_buffer and s < last:
            lead.dma_start(dma_in(s + 1))
        emit_fft(builders, plans[s % 2], twiddles, final_barrier=False)
        if double_buffer:
            lead.dma_wait()
        barrier()

        phase("bf")
        if double_buffer and s >= 2:
            lead.dma_start(dma_out(s - 1))
        emit_bf(builders, weights, spectrum, beams, nb, A, S)
        if double_buffer:
            lead.dma_wait()
        barrier()

        if s == 0:
            phase("chest")
            emit_chest(builders, pilots, beams, hbuf.base, w)
        else:
            phase("mmse")
            emit_mmse(builders, w, h_addr, beams, obuf.base)
        barrier()
        if not double_buffer and s > 0:
            transfer(dma_out(s))
    if double_buffer:
        transfer(dma_out(last))
    programs = [b.halt().build() for b in builders]

    l1_init = {**twiddles.image(), **weights.image(), **pilots.image()}
    outputs = _reference_regions(w, x_words, w_words, p_words, hbuf.base, out_hbm)
    phases = 3 * w.n_symbols
    logger.info(
        "chain %d symbols on %d cores: stride %d (%d conflicts), %d of %d L1 bytes, %s",
        w.n_symbols,
        ncores,
        stride,
        conflicts,
        layout.used_bytes,
        cfg.l1_bytes,
        "double-buffered" if double_buffer else "serialized",
    )
    kernel_ops = chain_op_counts(w)
    return ChainArtifacts(
        name="chain",
        programs=programs,
        op_count=sum(kernel_ops.values()),
        l1_init=l1_init,
        hbm_init=hbm_init,
        outputs=outputs,
        layout=layout,
        info={"stride": stride, "fetch_conflicts": conflicts, "stages": stages, "out_hbm": out_hbm},
        kernel_ops=kernel_ops,
        phases=phases,
        double_buffer=double_buffer,
    )


def _reference_regions(
    w: WorkloadConfig,
    x_words: np.ndarray,
    w_words: np.ndarray,
    p_words: np.ndarray,
    h_base: int,
    out_hbm: int,
) -> List[OutputRegion]:
    """Bit-exact composition of the kernel references, and the float composition as oracle."""
    A, N, S, nb, T = w.n_antennas, w.fft_size, w.n_subcarriers, w.n_beams, w.n_tx
    bins = subcarrier_bins(w)
    stages = len(fft_radices(N))
    weights_f = dequantize(w_words)
    out_bytes = S * (2 * T + 1) * 4

    def beams_of(s: int) -> tuple[np.ndarray, np.ndarray]:
        spectra = np.array([fft_reference(x_words[s, a], N) for a in range(A)], dtype=np.uint32)
        exact = bf_reference(w_words, spectra[:, bins])
        spectra_f = np.fft.fft(dequantize(x_words[s]), axis=1) / (1 << stages)
        return exact, weights_f @ spectra_f[:, bins]

    dmrs, dmrs_f = beams_of(0)
    h_exact = chest_reference(dmrs, p_words, T)
    h_f = estimate_channel(dmrs_f, dequantize(p_words), T)
    regions = [
        OutputRegion("chain.h", h_base + 4 * np.arange(S * nb * T, dtype=np.int64), h_exact.ravel(), fmt="q15c")
    ]
    for s in range(1, w.n_symbols):
        data, data_f = beams_of(s)
        expected = mmse_reference(h_exact, data, w.noise_variance)
        oracle = mmse_solve(h_f, data_f, w.noise_variance)
        base = out_hbm + (s - 1) * out_bytes
        regions += output_regions(f"chain.sym{s}", base, expected, oracle, T, space="hbm", tolerance=CHAIN_TOLERANCE)
    return regions


@dataclass
class ChainRun:
    report: MetricsReport
    verification: VerifyResult
    result: RunResult


def execute_chain(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    double_buffer: bool = True,
    seed: int = 1,
    memory: str = "hbm",
    scramble: bool = True,
    compute_only: bool = True,
    cores: Optional[int] = None,
    trace: Optional[TextIO] = None,
) -> ChainRun:
    """Build, run and verify the chain; with ``compute_only`` also rerun it over ideal memory."""
    artifacts = build_chain(w, cfg, double_buffer=double_buffer, seed=seed, cores=cores)
    result = artifacts.run(Cluster(cfg, memory=memory, seed=seed, scramble=scramble, trace=trace))
    verification = verify(artifacts, result)
    baseline = None
    if compute_only and memory != "ideal":
        baseline = artifacts.run(Cluster(cfg, memory="ideal", seed=seed, scramble=scramble)).cycles
    extras = {f"ops_expected.{k}": float(v) for k, v in artifacts.kernel_ops.items()}
    if "chest" in result.kernels:
        per_symbol = (result.cycles - result.kernels["chest"].cycles) / (w.n_symbols - 1)
        extras["symbol_latency_us"] = per_symbol / cfg.frequency_hz * 1e6
    report = MetricsCalculator.build_report(
        result,
        cfg,
        kernel="chain",
        seed=seed,
        workload=w,
        verification=verification,
        double_buffer=double_buffer,
        compute_only_cycles=baseline,
        latency_hiding_bound=latency_hiding_bound(cfg, artifacts.phases),
        extras=extras,
    )
    logger.info(
        "chain: %d cycles, overhead %.4f, outputs %s",
        report.cycles,
        report.total.overhead,
        "PASS" if verification.passed else "FAIL",
    )
    return ChainRun(report, verification, result)


def run_pusch_chain(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    double_buffer: bool = True,
    seed: int = 1,
    memory: str = "hbm",
    scramble: bool = True,
    compute_only: bool = True,
) -> MetricsReport:
    return execute_chain(w, cfg, double_buffer, seed, memory, scramble, compute_only).report
