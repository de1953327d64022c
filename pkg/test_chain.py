import numpy as np
import pytest

from app.config import ConfigError, default_workload, load_preset
from app.kernels.artifacts import read_words
from app.kernels.chain import (
    CHAIN_TOLERANCE,
    build_chain,
    chain_op_counts,
    execute_chain,
    latency_hiding_bound,
)
from app.metrics import transfer_overhead


@pytest.fixture(scope="module")
def cfg():
    return load_preset("tiny-32")


@pytest.fixture(scope="module")
def runs(cfg):
    w = default_workload(cfg)
    return {
        "double": execute_chain(w, cfg, double_buffer=True, seed=1),
        "serial": execute_chain(w, cfg, double_buffer=False, seed=1, compute_only=False),
    }


def test_chain_outputs_match_references(runs):
    for run in runs.values():
        assert run.verification.passed, run.verification.checks
        assert run.report.memory.passed
        assert run.report.accounting_ok


def test_chain_reports_every_kernel(runs, cfg):
    report = runs["double"].report
    assert {"fft", "bf", "chest", "mmse", "dma"} <= set(report.kernels)
    ops = chain_op_counts(default_workload(cfg))
    for name, count in ops.items():
        assert report.kernels[name].ops == count, name
        assert report.extras[f"ops_expected.{name}"] == count
    assert report.extras["symbol_latency_us"] > 0
    assert report.double_buffer is True


def test_serialized_chain_exposes_every_transfer(runs):
    total = runs["serial"].report.total
    assert total.transfer_cycles > 0
    assert total.exposed_cycles == total.transfer_cycles
    assert runs["serial"].report.compute_only_cycles is None


def test_double_buffering_hides_transfers(runs):
    double, serial = runs["double"].report, runs["serial"].report
    assert double.total.exposed_cycles < serial.total.exposed_cycles
    assert transfer_overhead(double) < transfer_overhead(serial)
    assert double.cycles < serial.cycles


def test_compute_only_rerun_is_a_lower_bound(runs):
    report = runs["double"].report
    assert report.compute_only_cycles <= report.cycles
    assert report.latency_hiding_bound > 0


def test_same_outputs_either_schedule(runs, cfg):
    artifacts = build_chain(default_workload(cfg), cfg)
    for region in artifacts.outputs:
        double = read_words(runs["double"].result, region)
        serial = read_words(runs["serial"].result, region)
        assert np.array_equal(double, serial), region.name


def test_latency_hiding_bound(cfg):
    # avg latency 20, no jitter, one 64-byte burst at 16 bytes per cycle per channel
    assert latency_hiding_bound(cfg, 3) == 3 * (20 + 0 + 4)


def test_chain_needs_a_data_symbol(cfg):
    with pytest.raises(ConfigError, match="data symbol"):
        build_chain(default_workload(cfg, n_symbols=1), cfg)


def test_chain_layer_limit(cfg):
    w = default_workload(cfg, n_antennas=8, n_beams=8, n_tx=5, n_subcarriers=40)
    with pytest.raises(ConfigError, match="at most"):
        build_chain(w, cfg)


def test_chain_phases_and_tolerance(cfg):
    artifacts = build_chain(default_workload(cfg), cfg)
    assert artifacts.phases == 3 * 2
    assert artifacts.hbm_init
    assert all(r.space == "hbm" for r in artifacts.outputs[1:])
    assert artifacts.outputs[1].tolerance == CHAIN_TOLERANCE


@pytest.mark.slow
def test_desk_chain_meets_targets():
    cfg = load_preset("desk-256")
    run = execute_chain(default_workload(cfg), cfg, seed=1)
    report = run.report
    assert run.verification.passed
    for name, m in report.kernels.items():
        if m.ops:
            assert m.ipc > 0.6, name
    assert transfer_overhead(report) < 0.09
    assert report.latency_hiding_bound - (report.cycles - report.compute_only_cycles) > 0
