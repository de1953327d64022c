from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import ConfigError
from app.kernels.artifacts import KernelArtifacts, OutputRegion
from app.kernels.chest import h_index
from app.kernels.layout import L1Layout, MatrixView
from app.kernels.workload import dequantize, qpsk_symbols, quantize, random_signal
from app.models import ClusterConfig, WorkloadConfig
from app.sim.alu import MASK32, cmacc_im, cmacc_re, evaluate, from_q20, to_q20
from app.sim.builder import ProgramBuilder
from app.sim.core import Instr

logger = logging.getLogger(__name__)

MMSE_TOLERANCE = 2.0**-6
MAX_TX = 4
FUSED_MAX_TX = 3
FLAG = 25
RHS_Y = 26
RHS_H = 27
CHANNEL_GAIN = 0.4
SYMBOL_AMPLITUDE = 0.5
SCATTER = 0.05

AddrFn = Callable[[int, int, int], int]


def mmse_op_count(n_tx: int, n_beams: int) -> int:
    """Real ops per subcarrier: Gram matrix and matched filter, Cholesky, two triangular solves."""
    n = n_tx
    return n_beams * (4 * n * n + 8 * n) + 8 * n + 11 * n * (n - 1) + 4 * n * (n - 1) * (n - 2) // 3


@dataclass(frozen=True)
class MmseRegisters:
    """Register map for one subcarrier.

    The lower triangle of A (later L) sits in r1 upwards: the real diagonal first, then
    (re, im) pairs. Up to three layers the matched filter is accumulated in the same pass
    as A and the two load buffers also hold y.
    """

    n: int

    @property
    def fused(self) -> bool:
        return self.n <= FUSED_MAX_TX

    def diag(self, i: int) -> int:
        return 1 + i

    def off(self, i: int, j: int) -> Tuple[int, int]:
        k = i * (i - 1) // 2 + j
        return 1 + self.n + 2 * k, 2 + self.n + 2 * k

    def z(self, i: int) -> Tuple[int, int]:
        base = 1 + self.n * self.n if self.fused else 17
        return base + 2 * i, base + 2 * i + 1

    def h(self, s: int, t: int) -> int:
        return 17 + s * (self.n + 1 if self.fused else self.n) + t

    def y(self, s: int) -> int:
        return 17 + s * (self.n + 1) + self.n


Op = Tuple[int, str, Tuple[int, ...], int]


def solve_ops(regs: MmseRegisters, sigma_q20: int) -> List[Op]:
    """Regularize, factor A = L L^H in place and solve L L^H x = z in place.

    The diagonal registers end up holding 1 / L_jj.
    """
    n = regs.n
    ops: List[Op] = [(regs.diag(i), "addi", (regs.diag(i),), sigma_q20) for i in range(n)]
    for j in range(n):
        d = regs.diag(j)
        for k in range(j):
            lr, li = regs.off(j, k)
            ops.append((d, "qcms_re", (d, lr, li, lr, li), 1))
        ops.append((FLAG, "pd_flag", (0 if j == 0 else FLAG, d), 0))
        ops.append((d, "qsqrt", (d,), 0))
        ops.append((d, "qrecip", (d,), 0))
        for i in range(j + 1, n):
            r, m = regs.off(i, j)
            for k in range(j):
                ar, ai = regs.off(i, k)
                br, bi = regs.off(j, k)
                ops.append((r, "qcms_re", (r, ar, ai, br, bi), 2))
                ops.append((m, "qcms_im", (m, ar, ai, br, bi), 2))
            ops.append((r, "qmul", (r, d), 0))
            ops.append((m, "qmul", (m, d), 0))
    for i in range(n):
        zr, zi = regs.z(i)
        for k in range(i):
            lr, li = regs.off(i, k)
            wr, wi = regs.z(k)
            ops.append((zr, "qcms_re", (zr, lr, li, wr, wi), 0))
            ops.append((zi, "qcms_im", (zi, lr, li, wr, wi), 0))
        ops.append((zr, "qmul", (zr, regs.diag(i)), 0))
        ops.append((zi, "qmul", (zi, regs.diag(i)), 0))
    for i in reversed(range(n)):
        zr, zi = regs.z(i)
        for k in range(i + 1, n):
            lr, li = regs.off(k, i)
            xr, xi = regs.z(k)
            ops.append((zr, "qcms_re", (zr, lr, li, xr, xi), 1))
            ops.append((zi, "qcms_im", (zi, lr, li, xr, xi), 1))
        ops.append((zr, "qmul", (zr, regs.diag(i)), 0))
        ops.append((zi, "qmul", (zi, regs.diag(i)), 0))
    return ops


def _emit_subcarrier(
    b: ProgramBuilder,
    regs: MmseRegisters,
    sc: int,
    n_beams: int,
    h_addr: AddrFn,
    y: MatrixView,
    out_base: int,
    solve: List[Op],
) -> None:
    n = regs.n

    def load(beam: int, s: int) -> None:
        for t in range(n):
            b.load(regs.h(s, t), h_addr(sc, beam, t))
        if regs.fused:
            b.load(regs.y(s), y.addr(beam, sc))

    def accumulate(beam: int, s: int) -> None:
        first = beam == 0
        for i in range(n):
            hi = regs.h(s, i)
            d = regs.diag(i)
            b.op(d, "cmacc_re", 0 if first else d, hi, hi)
            for j in range(i):
                r, m = regs.off(i, j)
                b.op(r, "cmacc_re", 0 if first else r, hi, regs.h(s, j))
                b.op(m, "cmacc_im", 0 if first else m, hi, regs.h(s, j))
        if regs.fused:
            for i in range(n):
                zr, zi = regs.z(i)
                b.op(zr, "cmacc_re", 0 if first else zr, regs.h(s, i), regs.y(s))
                b.op(zi, "cmacc_im", 0 if first else zi, regs.h(s, i), regs.y(s))

    load(0, 0)
    for beam in range(n_beams):
        if beam + 1 < n_beams:
            load(beam + 1, (beam + 1) % 2)
        accumulate(beam, beam % 2)
    if not regs.fused:
        for beam in range(n_beams):
            b.load(RHS_Y, y.addr(beam, sc))
            for t in range(n):
                b.load(RHS_H + t, h_addr(sc, beam, t))
            for i in range(n):
                zr, zi = regs.z(i)
                b.op(zr, "cmacc_re", 0 if beam == 0 else zr, RHS_H + i, RHS_Y)
                b.op(zi, "cmacc_im", 0 if beam == 0 else zi, RHS_H + i, RHS_Y)
    for dst, fn, srcs, imm in solve:
        b.op(dst, fn, *srcs, imm=imm)
    stride = 2 * n + 1
    for i in range(n):
        zr, zi = regs.z(i)
        b.store(zr, out_base + 4 * (sc * stride + 2 * i))
        b.store(zi, out_base + 4 * (sc * stride + 2 * i + 1))
    b.store(FLAG, out_base + 4 * (sc * stride + 2 * n))


def emit_mmse(
    builders: Sequence[ProgramBuilder],
    w: WorkloadConfig,
    h_addr: AddrFn,
    y: MatrixView,
    out_base: int,
) -> None:
    """One subcarrier per core at a time, subcarriers dealt round-robin."""
    if w.n_tx > MAX_TX:
        raise ConfigError(f"MMSE supports at most {MAX_TX} layers, got n_tx={w.n_tx}")
    regs = MmseRegisters(w.n_tx)
    solve = solve_ops(regs, to_q20(w.noise_variance))
    cores = len(builders)
    for core, b in enumerate(builders):
        for sc in range(core, w.n_subcarriers, cores):
            _emit_subcarrier(b, regs, sc, w.n_beams, h_addr, y, out_base, solve)


def mmse_reference(h: np.ndarray, y: np.ndarray, noise_variance: float) -> np.ndarray:
    """Bit-exact solver outputs per subcarrier: n (re, im) Q20 pairs then the flag word.

    ``h`` has shape (n_subcarriers, n_beams, n_tx) and ``y`` (n_beams, n_subcarriers).
    """
    ns, nb, n = h.shape
    regs_map = MmseRegisters(n)
    solve = solve_ops(regs_map, to_q20(noise_variance))
    out = np.zeros((ns, 2 * n + 1), dtype=np.uint32)
    hl = h.tolist()
    yl = y.tolist()
    for sc in range(ns):
        regs = [0] * 32
        hs = hl[sc]
        for i in range(n):
            acc = 0
            for beam in range(nb):
                acc = cmacc_re(acc, hs[beam][i], hs[beam][i])
            regs[regs_map.diag(i)] = acc
            for j in range(i):
                re = im = 0
                for beam in range(nb):
                    re = cmacc_re(re, hs[beam][i], hs[beam][j])
                    im = cmacc_im(im, hs[beam][i], hs[beam][j])
                r, m = regs_map.off(i, j)
                regs[r], regs[m] = re, im
            re = im = 0
            for beam in range(nb):
                re = cmacc_re(re, hs[beam][i], yl[beam][sc])
                im = cmacc_im(im, hs[beam][i], yl[beam][sc])
            zr, zi = regs_map.z(i)
            regs[zr], regs[zi] = re, im
        for dst, fn, srcs, imm in solve:
            regs[dst] = evaluate(fn, [regs[s] for s in srcs], imm) & MASK32
        for i in range(n):
            zr, zi = regs_map.z(i)
            out[sc, 2 * i] = regs[zr]
            out[sc, 2 * i + 1] = regs[zi]
        out[sc, 2 * n] = regs[FLAG]
    return out


def mmse_oracle(h_words: np.ndarray, y_words: np.ndarray, noise_variance: float) -> np.ndarray:
    """Float direct solve of (H^H H + s2 I) x = H^H y per subcarrier, shape (n_subcarriers, n_tx)."""
    return mmse_solve(dequantize(h_words), dequantize(y_words), noise_variance)


def mmse_solve(h: np.ndarray, y: np.ndarray, noise_variance: float) -> np.ndarray:
    """Singular subcarriers come back as NaN."""
    ns, _, n = h.shape
    s2 = from_q20(to_q20(noise_variance))
    out = np.zeros((ns, n), dtype=np.complex128)
    for sc in range(ns):
        hs = h[sc]
        gram = hs.conj().T @ hs + s2 * np.eye(n)
        try:
            out[sc] = np.linalg.solve(gram, hs.conj().T @ y[:, sc])
        except np.linalg.LinAlgError:
            out[sc] = np.nan
    return out


def output_regions(
    name: str,
    base: int,
    expected: np.ndarray,
    oracle: Optional[np.ndarray],
    n_tx: int,
    space: str = "l1",
    tolerance: float = MMSE_TOLERANCE,
) -> List[OutputRegion]:
    """Solution words (checked against the float solve where not flagged) and flag words."""
    ns = expected.shape[0]
    stride = 2 * n_tx + 1
    rows = base + 4 * stride * np.arange(ns, dtype=np.int64)[:, None]
    x_addrs = (rows + 4 * np.arange(2 * n_tx, dtype=np.int64)[None, :]).ravel()
    flag_addrs = (rows + 4 * 2 * n_tx).ravel()
    ok = expected[:, 2 * n_tx] == 0
    mask = np.repeat(ok, n_tx)
    return [
        OutputRegion(
            f"{name}.x",
            x_addrs,
            expected[:, : 2 * n_tx].ravel(),
            None if oracle is None else oracle.ravel(),
            "q20c",
            tolerance,
            "relative",
            space,
            mask,
        ),
        OutputRegion(f"{name}.flags", flag_addrs, expected[:, 2 * n_tx].ravel(), fmt="u32", space=space),
    ]


def well_conditioned_channel(rng: np.random.Generator, n_subcarriers: int, n_beams: int, n_tx: int) -> np.ndarray:
    """Per-subcarrier n_beams x n_tx channels with orthonormal columns scaled by CHANNEL_GAIN, plus scatter."""
    out = np.zeros((n_subcarriers, n_beams, n_tx), dtype=np.complex128)
    for sc in range(n_subcarriers):
        g = rng.standard_normal((n_beams, n_tx)) + 1j * rng.standard_normal((n_beams, n_tx))
        q, _ = np.linalg.qr(g)
        out[sc] = CHANNEL_GAIN * q[:, :n_tx] + random_signal(rng, (n_beams, n_tx), SCATTER)
    return out


def build_mmse_inversion(
    w: WorkloadConfig,
    cfg: ClusterConfig,
    seed: int = 1,
    identity: bool = False,
    channel: Optional[np.ndarray] = None,
    received: Optional[np.ndarray] = None,
    cores: Optional[int] = None,
) -> KernelArtifacts:
    nb, ns, T = w.n_beams, w.n_subcarriers, w.n_tx
    if T > MAX_TX:
        raise ConfigError(f"MMSE supports at most {MAX_TX} layers, got n_tx={T}")
    ncores = cores or cfg.total_cores
    if ncores > cfg.total_cores:
        raise ConfigError(f"{ncores} cores requested on a {cfg.total_cores}-core cluster")
    rng = np.random.default_rng(seed)
    if channel is None:
        if identity:
            if nb != T:
                raise ConfigError(f"identity channel needs n_beams == n_tx, got {nb} and {T}")
            channel = np.broadcast_to(np.eye(T, dtype=np.complex128), (ns, T, T))
        else:
            channel = well_conditioned_channel(rng, ns, nb, T)
    if received is None:
        if identity:
            received = random_signal(rng, (nb, ns))
        else:
            x = SYMBOL_AMPLITUDE * qpsk_symbols(rng, (ns, T))
            received = np.einsum("sbt,st->bs", channel, x)
    if np.shape(channel) != (ns, nb, T) or np.shape(received) != (nb, ns):
        raise ConfigError(
            f"shape mismatch: H is {np.shape(channel)}, y is {np.shape(received)}; "
            f"expected ({ns}, {nb}, {T}) and ({nb}, {ns})"
        )
    h_words = quantize(np.asarray(channel))
    y_words = quantize(np.asarray(received))

    layout = L1Layout(cfg)
    hbuf = layout.shared("mmse.h", ns * nb * T * 4)
    ybuf = layout.shared("mmse.y", nb * ns * 4)
    obuf = layout.shared("mmse.out", ns * (2 * T + 1) * 4)

    def h_addr(sc: int, beam: int, t: int) -> int:
        return hbuf.base + 4 * h_index(sc, beam, t, nb, T)

    pool: Dict[Instr, Instr] = {}
    builders = [ProgramBuilder(f"mmse/{c}", pool).mark("mmse") for c in range(ncores)]
    emit_mmse(builders, w, h_addr, MatrixView(ybuf.base, ns), obuf.base)
    programs = [b.halt().build() for b in builders]

    expected = mmse_reference(h_words, y_words, w.noise_variance)
    oracle = mmse_oracle(h_words, y_words, w.noise_variance)
    flagged = int(np.count_nonzero(expected[:, 2 * T]))
    if flagged:
        logger.info("%d of %d subcarriers flagged not positive definite", flagged, ns)
    return KernelArtifacts(
        name="mmse",
        programs=programs,
        op_count=ns * mmse_op_count(T, nb),
        l1_init={hbuf.base: h_words.ravel(), ybuf.base: y_words.ravel()},
        outputs=output_regions("mmse", obuf.base, expected, oracle, T),
        layout=layout,
        info={"fused": int(MmseRegisters(T).fused), "flagged": flagged},
    )
