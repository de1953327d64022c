from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import ConfigError
from app.kernels.artifacts import KernelArtifacts, OutputRegion
from app.kernels.layout import L1Layout, MatrixView, PrivateTable
from app.kernels.workload import dequantize, quantize, random_signal, random_weights
from app.models import ClusterConfig, WorkloadConfig
from app.sim.alu import cmac_im, cmac_pack, cmac_re
from app.sim.builder import ProgramBuilder
from app.sim.core import Instr

logger = logging.getLogger(__name__)

BF_TOLERANCE = 2.0**-14
MAC_OPS = 8
# MACs whose operands are in flight ahead of the one being computed
DEPTH = 4
SLOTS = DEPTH + 1
ACC_RE = 11
ACC_IM = 12
RESULT = 13


def bf_op_count(n_beams: int, n_antennas: int, n_subcarriers: int) -> int:
    return MAC_OPS * n_beams * n_antennas * n_subcarriers


def core_tile(core: int, cores: int, n_beams: int, n_subcarriers: int) -> Tuple[List[int], List[int]]:
    """Beams and subcarriers of one core's output tile.

    Cores form gcd(n_beams, cores) beam groups of contiguous beams; within a group the
    subcarriers are dealt round-robin, each group starting at a different offset so
    groups do not read the same antenna column in the same cycle.
    """
    groups = math.gcd(n_beams, cores)
    bg, sb = core % groups, core // groups
    per_group = n_beams // groups
    beams = list(range(bg * per_group, (bg + 1) * per_group))
    scs = list(range(sb, n_subcarriers, cores // groups))
    if scs:
        k = bg % len(scs)
        scs = scs[k:] + scs[:k]
    return beams, scs


def weight_table(layout: L1Layout, weights: np.ndarray, cores: int, n_subcarriers: int) -> PrivateTable:
    n_beams, n_antennas = weights.shape
    entries: List[Dict[Tuple[int, int], int]] = []
    for core in range(cores):
        beams, scs = core_tile(core, cores, n_beams, n_subcarriers)
        entries.append(
            {(b, a): int(weights[b, a]) for b in (beams if scs else []) for a in range(n_antennas)}
        )
    return PrivateTable(layout, "bf.weights", entries)


def emit_bf(
    builders: Sequence[ProgramBuilder],
    weights: PrivateTable,
    y: MatrixView,
    out: MatrixView,
    n_beams: int,
    n_antennas: int,
    n_subcarriers: int,
) -> None:
    """One flat stream of complex MACs per core, operands loaded DEPTH MACs ahead."""
    cores = len(builders)
    for core, b in enumerate(builders):
        beams, scs = core_tile(core, cores, n_beams, n_subcarriers)
        macs = [(beam, sc, a) for sc in scs for beam in beams for a in range(n_antennas)]

        def load(i: int) -> None:
            beam, sc, a = macs[i]
            s = i % SLOTS
            b.load(1 + 2 * s, weights.addr(core, (beam, a)))
            b.load(2 + 2 * s, y.addr(a, sc))

        for i in range(min(DEPTH, len(macs))):
            load(i)
        for i, (beam, sc, a) in enumerate(macs):
            s = i % SLOTS
            w, v = 1 + 2 * s, 2 + 2 * s
            if a == n_antennas - 1:
                first = a == 0
                b.op(RESULT, "cmac_pack", 0 if first else ACC_RE, 0 if first else ACC_IM, w, v)
                b.store(RESULT, out.addr(beam, sc))
            else:
                b.op(ACC_RE, "cmac_re", 0 if a == 0 else ACC_RE, w, v)
                b.op(ACC_IM, "cmac_im", 0 if a == 0 else ACC_IM, w, v)
            if i + DEPTH < len(macs):
                load(i + DEPTH)


def bf_reference(weights: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bit-exact B = W . Y over packed words; one rounding per output."""
    n_beams, n_antennas = weights.shape
    n_sc = y.shape[1]
    out = np.zeros((n_beams, n_sc), dtype=np.uint32)
    wl = weights.tolist()
    yl = y.tolist()
    for bm in range(n_beams):
        row = wl[bm]
        for sc in range(n_sc):
            re = im = 0
            for a in range(n_antennas - 1):
                re = cmac_re(re, row[a], yl[a][sc])
                im = cmac_im(im, row[a], yl[a][sc])
            out[bm, sc] = cmac_pack(re, im, row[-1], yl[-1][sc])
    return out


def build_beamforming(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    seed: int = 1,
    identity: bool = False,
    weights: Optional[np.ndarray] = None,
    signal: Optional[np.ndarray] = None,
    cores: Optional[int] = None,
) -> KernelArtifacts:
    nb, na, ns = w.n_beams, w.n_antennas, w.n_subcarriers
    ncores = cores or cfg.total_cores
    if ncores > cfg.total_cores:
        raise ConfigError(f"{ncores} cores requested on a {cfg.total_cores}-core cluster")
    rng = np.random.default_rng(seed)
    if weights is None:
        if identity:
            if nb != na:
                raise ConfigError(f"identity beamforming needs n_beams == n_antennas, got {nb} and {na}")
            weights = np.eye(nb, dtype=np.complex128)
        else:
            weights = random_weights(rng, nb, na)
    if signal is None:
        signal = random_signal(rng, (na, ns))
    if np.shape(weights) != (nb, na) or np.shape(signal) != (na, ns):
        raise ConfigError(
            f"shape mismatch: W is {np.shape(weights)}, Y is {np.shape(signal)}; expected ({nb}, {na}) and ({na}, {ns})"
        )
    w_words = quantize(np.asarray(weights))
    y_words = quantize(np.asarray(signal))

    layout = L1Layout(cfg)
    ybuf = layout.shared("bf.y", na * ns * 4)
    obuf = layout.shared("bf.out", nb * ns * 4)
    table = weight_table(layout, w_words, ncores, ns)
    y_view = MatrixView(ybuf.base, ns)
    out_view = MatrixView(obuf.base, ns)

    pool: Dict[Instr, Instr] = {}
    builders = [ProgramBuilder(f"bf/{c}", pool).mark("bf") for c in range(ncores)]
    emit_bf(builders, table, y_view, out_view, nb, na, ns)
    programs = [b.halt().build() for b in builders]

    l1_init = table.image()
    l1_init[ybuf.base] = y_words.ravel()
    expected = bf_reference(w_words, y_words)
    oracle = dequantize(w_words) @ dequantize(y_words)
    addrs = obuf.base + 4 * np.arange(nb * ns, dtype=np.int64)
    logger.debug("bf %dx%dx%d on %d cores", nb, na, ns, ncores)
    return KernelArtifacts(
        name="bf",
        programs=programs,
        op_count=bf_op_count(nb, na, ns),
        l1_init=l1_init,
        outputs=[OutputRegion("bf.out", addrs, expected.ravel(), oracle.ravel(), "q15c", BF_TOLERANCE, "absolute")],
        layout=layout,
        info={"beam_groups": math.gcd(nb, ncores)},
    )
