from __future__ import annotations

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import ConfigError
from app.kernels.artifacts import KernelArtifacts, OutputRegion
from app.kernels.layout import L1Layout, MatrixView, PrivateTable
from app.kernels.workload import (
    PilotKind,
    check_comb,
    check_pilots,
    comb_source,
    dequantize,
    pilots,
    quantize,
    random_signal,
)
from app.models import ClusterConfig, WorkloadConfig
from app.sim.alu import cmulc_q15
from app.sim.builder import ProgramBuilder
from app.sim.core import Instr

logger = logging.getLogger(__name__)

CHEST_TOLERANCE = 2.0**-14
CMULC_OPS = 6
SET_STRIDE = 8
RESULT = 17


def chest_op_count(n_subcarriers: int, n_beams: int, n_tx: int) -> int:
    return CMULC_OPS * n_subcarriers * n_beams * n_tx


def core_items(core: int, cores: int, n_subcarriers: int, n_beams: int) -> List[Tuple[int, int]]:
    """(subcarrier, beam) work items dealt round-robin over the flattened grid."""
    return [divmod(i, n_beams) for i in range(core, n_subcarriers * n_beams, cores)]


def h_index(sc: int, beam: int, t: int, n_beams: int, n_tx: int) -> int:
    """Word index of the estimate for (subcarrier, beam, tx) in the channel buffer."""
    return (sc * n_beams + beam) * n_tx + t


def pilot_table(layout: L1Layout, pilot_words: np.ndarray, w: WorkloadConfig, cores: int) -> PrivateTable:
    entries: List[Dict[int, int]] = []
    for core in range(cores):
        seen: Dict[int, int] = {}
        for sc, _ in core_items(core, cores, w.n_subcarriers, w.n_beams):
            for t in range(w.n_tx):
                src = comb_source(sc, t, w.n_tx)
                seen.setdefault(src, int(pilot_words[src]))
        entries.append(seen)
    return PrivateTable(layout, "chest.pilots", entries)


def emit_chest(
    builders: Sequence[ProgramBuilder],
    table: PrivateTable,
    ydmrs: MatrixView,
    h_base: int,
    w: WorkloadConfig,
) -> None:
    """Per item: T loads of the received pilot, T private pilot loads, T conjugate multiplies."""
    cores = len(builders)
    nb, T = w.n_beams, w.n_tx
    for core, b in enumerate(builders):
        items = core_items(core, cores, w.n_subcarriers, nb)

        def load(item: Tuple[int, int], s: int) -> None:
            sc, beam = item
            for t in range(T):
                src = comb_source(sc, t, T)
                b.load(1 + SET_STRIDE * s + 2 * t, ydmrs.addr(beam, src))
                b.load(2 + SET_STRIDE * s + 2 * t, table.addr(core, src))

        def compute(item: Tuple[int, int], s: int) -> None:
            sc, beam = item
            for t in range(T):
                b.op(RESULT + t, "cmulc", 1 + SET_STRIDE * s + 2 * t, 2 + SET_STRIDE * s + 2 * t)
                b.store(RESULT + t, h_base + 4 * h_index(sc, beam, t, nb, T))

        if not items:
            continue
        load(items[0], 0)
        for i, item in enumerate(items):
            if i + 1 < len(items):
                load(items[i + 1], (i + 1) % 2)
            compute(item, i % 2)


def chest_reference(ydmrs: np.ndarray, pilot_words: np.ndarray, n_tx: int) -> np.ndarray:
    """Bit-exact estimates, shape (n_subcarriers, n_beams, n_tx)."""
    nb, ns = ydmrs.shape
    out = np.zeros((ns, nb, n_tx), dtype=np.uint32)
    for sc in range(ns):
        for beam in range(nb):
            for t in range(n_tx):
                src = comb_source(sc, t, n_tx)
                out[sc, beam, t] = cmulc_q15(int(ydmrs[beam, src]), int(pilot_words[src]))
    return out


def chest_oracle(ydmrs_words: np.ndarray, pilot_words: np.ndarray, n_tx: int) -> np.ndarray:
    return estimate_channel(dequantize(ydmrs_words), dequantize(pilot_words), n_tx)


def estimate_channel(y: np.ndarray, p: np.ndarray, n_tx: int) -> np.ndarray:
    """Float least-squares estimate from the comb pilots, shape (n_subcarriers, n_beams, n_tx)."""
    nb, ns = y.shape
    out = np.zeros((ns, nb, n_tx), dtype=np.complex128)
    for sc in range(ns):
        for t in range(n_tx):
            src = comb_source(sc, t, n_tx)
            out[sc, :, t] = y[:, src] * np.conj(p[src])
    return out


def build_channel_estimate(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    seed: int = 1,
    pilot_kind: PilotKind = "qpsk",
    received: Optional[np.ndarray] = None,
    cores: Optional[int] = None,
) -> KernelArtifacts:
    check_comb(w)
    nb, ns, T = w.n_beams, w.n_subcarriers, w.n_tx
    ncores = cores or cfg.total_cores
    if ncores > cfg.total_cores:
        raise ConfigError(f"{ncores} cores requested on a {cfg.total_cores}-core cluster")
    rng = np.random.default_rng(seed)
    p_words = quantize(pilots(pilot_kind, ns, rng))
    check_pilots(p_words)
    if received is None:
        received = random_signal(rng, (nb, ns))
    if np.shape(received) != (nb, ns):
        raise ConfigError(f"shape mismatch: received DMRS is {np.shape(received)}, expected ({nb}, {ns})")
    y_words = quantize(np.asarray(received))

    layout = L1Layout(cfg)
    ybuf = layout.shared("chest.ydmrs", nb * ns * 4)
    hbuf = layout.shared("chest.h", ns * nb * T * 4)
    table = pilot_table(layout, p_words, w, ncores)

    pool: Dict[Instr, Instr] = {}
    builders = [ProgramBuilder(f"chest/{c}", pool).mark("chest") for c in range(ncores)]
    emit_chest(builders, table, MatrixView(ybuf.base, ns), hbuf.base, w)
    programs = [b.halt().build() for b in builders]

    l1_init = table.image()
    l1_init[ybuf.base] = y_words.ravel()
    expected = chest_reference(y_words, p_words, T)
    oracle = chest_oracle(y_words, p_words, T)
    addrs = hbuf.base + 4 * np.arange(ns * nb * T, dtype=np.int64)
    return KernelArtifacts(
        name="chest",
        programs=programs,
        op_count=chest_op_count(ns, nb, T),
        l1_init=l1_init,
        outputs=[
            OutputRegion("chest.h", addrs, expected.ravel(), oracle.ravel(), "q15c", CHEST_TOLERANCE, "absolute")
        ],
        layout=layout,
        info={"pilots": pilot_kind},
    )
