from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Literal, Optional

import numpy as np

from app.config import ConfigError
from app.models import WorkloadConfig
from app.sim.alu import pack, to_q15, unpack_complex

PilotKind = Literal["qpsk", "one", "j"]

RANDOM_AMPLITUDE = 1 / 8
# aggregate antenna column norm the beamformer sees
COLUMN_NORM = 0.25
STEERING_SCATTER = 0.1


def quantize(values: np.ndarray) -> np.ndarray:
    """Complex floats to packed Q1.15 words, same shape."""
    flat = np.ravel(values)
    return np.array([pack(to_q15(z.real), to_q15(z.imag)) for z in flat], dtype=np.uint32).reshape(np.shape(values))


def dequantize(words: np.ndarray) -> np.ndarray:
    flat = np.ravel(words)
    return np.array([unpack_complex(int(w)) for w in flat], dtype=np.complex128).reshape(np.shape(words))


def random_signal(rng: np.random.Generator, shape: tuple, amplitude: float = RANDOM_AMPLITUDE) -> np.ndarray:
    return rng.uniform(-amplitude, amplitude, shape) + 1j * rng.uniform(-amplitude, amplitude, shape)


def subcarrier_bin(sc: int, w: WorkloadConfig) -> int:
    """FFT bin of a subcarrier: the allocation is centred on DC."""
    return (sc - w.n_subcarriers // 2) % w.fft_size


def subcarrier_bins(w: WorkloadConfig) -> np.ndarray:
    return (np.arange(w.n_subcarriers) - w.n_subcarriers // 2) % w.fft_size


def comb_source(sc: int, t: int, n_tx: int) -> int:
    """Subcarrier that carries tx ``t``'s pilot within ``sc``'s comb group."""
    return (sc // n_tx) * n_tx + t


def check_comb(w: WorkloadConfig) -> None:
    if w.n_subcarriers % w.n_tx:
        raise ConfigError(
            f"n_subcarriers={w.n_subcarriers} is not a multiple of n_tx={w.n_tx}; DMRS comb groups would be incomplete"
        )


def random_weights(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random beamforming matrix with every row's l1 norm (re and im parts) at most 1."""
    m = rng.uniform(-1, 1, (rows, cols)) + 1j * rng.uniform(-1, 1, (rows, cols))
    norms = np.sum(np.abs(m.real) + np.abs(m.imag), axis=1, keepdims=True)
    return m / (norms * 1.001)


def dft_beams(n_beams: int, n_antennas: int) -> np.ndarray:
    """First ``n_beams`` DFT beams over a uniform array, each of unit l2 norm."""
    b = np.arange(n_beams)[:, None]
    a = np.arange(n_antennas)[None, :]
    return np.exp(-2j * np.pi * b * a / n_antennas) / math.sqrt(n_antennas)


def pilots(kind: PilotKind, n_subcarriers: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Unit-modulus DMRS pilots per subcarrier as complex floats."""
    if kind == "one":
        return np.ones(n_subcarriers, dtype=np.complex128)
    if kind == "j":
        return np.full(n_subcarriers, 1j)
    if rng is None:
        raise ValueError("qpsk pilots need a generator")
    bits = rng.integers(0, 2, (n_subcarriers, 2))
    return ((1 - 2 * bits[:, 0]) + 1j * (1 - 2 * bits[:, 1])) / math.sqrt(2)


def check_pilots(words: np.ndarray) -> None:
    zero = [i for i, w in enumerate(np.ravel(words)) if int(w) == 0]
    if zero:
        raise ConfigError(f"zero-modulus pilot on subcarrier {zero[0]}")


def qpsk_symbols(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    bits = rng.integers(0, 2, shape + (2,))
    return ((1 - 2 * bits[..., 0]) + 1j * (1 - 2 * bits[..., 1])) / math.sqrt(2)


@dataclass
class UplinkScenario:
    """Frequency-domain antenna data of one slot and everything needed to rebuild it.

    ``freq[s]`` is n_antennas x n_subcarriers; symbol 0 carries the comb DMRS, the
    others carry QPSK layers from every tx plus noise.
    """

    channel: np.ndarray
    pilots: np.ndarray
    layers: np.ndarray
    freq: np.ndarray


def uplink_scenario(w: WorkloadConfig, rng: np.random.Generator) -> UplinkScenario:
    """Seeded slot with one steered path per tx, constant over each comb group.

    Tx ``t`` arrives along DFT beam ``t * n_beams // n_tx`` plus a small random scatter,
    so the beam-domain channel is well conditioned.
    """
    check_comb(w)
    A, S, T = w.n_antennas, w.n_subcarriers, w.n_tx
    groups = S // T
    a = np.arange(A)
    steer = np.stack([np.exp(2j * np.pi * (t * w.n_beams // T) * a / A) for t in range(T)], axis=1)
    gains = np.exp(2j * np.pi * rng.uniform(0, 1, (groups, T)))
    scatter = random_signal(rng, (groups, A, T), STEERING_SCATTER)
    channel = steer[None, :, :] * gains[:, None, :] + scatter
    # data symbols have every tx on every subcarrier
    channel *= COLUMN_NORM / math.sqrt(A * T)
    p = pilots("qpsk", S, rng)
    layers = qpsk_symbols(rng, (w.n_symbols, T, S))
    freq = np.zeros((w.n_symbols, A, S), dtype=np.complex128)
    noise_std = math.sqrt(w.noise_variance / 2) * COLUMN_NORM / math.sqrt(A)
    for sc in range(S):
        h = channel[sc // T]
        freq[0, :, sc] = h[:, sc % T] * p[sc]
        for s in range(1, w.n_symbols):
            noise = noise_std * (rng.standard_normal(A) + 1j * rng.standard_normal(A))
            freq[s, :, sc] = h @ layers[s, :, sc] + noise
    return UplinkScenario(channel=channel, pilots=p, layers=layers, freq=freq)


def time_domain(freq: np.ndarray, w: WorkloadConfig, stages: int) -> np.ndarray:
    """Antenna samples whose scaled FFT (DFT / 2^stages) gives ``freq`` on the allocated bins."""
    full = np.zeros(freq.shape[:-1] + (w.fft_size,), dtype=np.complex128)
    full[..., subcarrier_bins(w)] = freq
    return np.fft.ifft(full * (1 << stages), axis=-1)


def per_core(items: int, cores: int, core: int) -> List[int]:
    """Items ``core``, ``core + cores``, ... of a round-robin split."""
    return list(range(core, items, cores))
