import numpy as np
import pytest

from app.config import ConfigError, default_workload, load_preset
from app.kernels.artifacts import verify
from app.kernels.fft import (
    FFT_TOLERANCE,
    build_fft,
    digit_position,
    fft_op_count,
    fft_radices,
    fft_reference,
    input_order,
)
from app.kernels.layout import L1BudgetError, L1Layout
from app.kernels.workload import dequantize, quantize, random_signal
from app.metrics import MetricsCalculator
from app.sim.cluster import Cluster


def _error(n, seed):
    x = quantize(random_signal(np.random.default_rng(seed), (n,)))
    got = dequantize(np.array(fft_reference(x, n), dtype=np.uint32))
    want = np.fft.fft(dequantize(x)) / (1 << len(fft_radices(n)))
    return np.max(np.abs(got - want)) / np.max(np.abs(want))


def test_radices():
    assert fft_radices(64) == [4, 4, 4]
    assert fft_radices(128) == [4, 4, 4, 2]
    assert fft_radices(2) == [2]
    with pytest.raises(ConfigError):
        fft_radices(1)


def test_input_order_is_a_permutation():
    for n in (8, 16, 64, 128):
        radices = fft_radices(n)
        order = input_order(n, radices)
        assert sorted(order) == list(range(n))
        assert all(order[digit_position(i, n, radices)] == i for i in range(n))


def test_radix4_digit_reversal():
    # pure radix-4 at n=16 swaps the two base-4 digits
    assert [digit_position(i, 16, [4, 4]) for i in (1, 4, 6)] == [4, 1, 9]


def test_op_count():
    assert fft_op_count(64) == 3 * 16 * 34
    assert fft_op_count(8, antennas=2) == 2 * (2 * 34 + 4 * 10)


@pytest.mark.parametrize("n", [16, 64, 128, 256])
def test_reference_matches_float_dft(n):
    for seed in range(10):
        assert _error(n, seed) <= FFT_TOLERANCE


@pytest.mark.slow
@pytest.mark.parametrize("n", [1024, 2048, 4096])
def test_reference_matches_float_dft_large(n):
    for seed in range(100):
        assert _error(n, seed) <= FFT_TOLERANCE


def test_reference_impulse_is_flat():
    n = 64
    x = np.zeros(n, dtype=np.uint32)
    x[0] = quantize(np.array([0.5]))[0]
    out = fft_reference(x, n)
    assert len(set(out)) == 1


def test_simulated_fft_matches_reference():
    cfg = load_preset("tiny-32")
    w = default_workload(cfg)
    artifacts = build_fft(w, cfg, seed=4)
    result = artifacts.run(Cluster(cfg))
    check = verify(artifacts, result)
    assert check.passed, check.checks
    assert check.checks[0].words == w.n_antennas * w.fft_size


def test_simulated_impulse_is_flat():
    cfg = load_preset("tiny-32")
    w = default_workload(cfg)
    artifacts = build_fft(w, cfg, impulse=True, antennas=1)
    result = artifacts.run(Cluster(cfg))
    assert verify(artifacts, result).passed
    region = artifacts.outputs[0]
    words = result.l1.words[region.addrs >> 2]
    assert len(set(words.tolist())) == 1


def test_fewer_cores_same_numbers():
    cfg = load_preset("tiny-32")
    w = default_workload(cfg)
    full = build_fft(w, cfg, seed=2)
    part = build_fft(w, cfg, seed=2, cores=8)
    assert len(part.programs) == 8
    assert np.array_equal(full.outputs[0].expected, part.outputs[0].expected)
    assert verify(part, part.run(Cluster(cfg))).passed


def test_odd_power_size_runs():
    cfg = load_preset("tiny-32")
    w = default_workload(cfg, fft_size=128)
    artifacts = build_fft(w, cfg, seed=9, antennas=2)
    assert artifacts.info["stages"] == 4
    assert verify(artifacts, artifacts.run(Cluster(cfg))).passed


def test_too_many_cores():
    cfg = load_preset("tiny-32")
    with pytest.raises(ConfigError):
        build_fft(default_workload(cfg), cfg, cores=64)


def test_budget_error_when_buffers_do_not_fit():
    cfg = load_preset("tiny-32")
    layout = L1Layout(cfg)
    layout.shared("a", cfg.l1_bytes // 2)
    layout.private("p", 4)
    with pytest.raises(L1BudgetError) as info:
        layout.shared("b", cfg.l1_bytes // 2)
    assert info.value.available == cfg.l1_bytes
    assert "b" in str(info.value)


@pytest.mark.slow
def test_desk_fft_ipc():
    cfg = load_preset("desk-256")
    w = default_workload(cfg)
    artifacts = build_fft(w, cfg, seed=1)
    cluster = Cluster(cfg)
    result = artifacts.run(cluster)
    assert verify(artifacts, result).passed
    report = MetricsCalculator.build_report(result, cfg, kernel="fft", seed=1)
    assert report.kernels["fft"].ipc > 0.6
