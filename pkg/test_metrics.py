import json

import pytest

from app.config import load_preset
from app.evaluation import ExpectationChecker, ExpectationSchemaError, load_expectations
from app.metrics import (
    SCHEMA,
    KernelMetrics,
    MetricsCalculator,
    emit,
    ipc,
    load_report,
    parse_report,
    stall_table,
    transfer_overhead,
    transfer_table,
)
from app.models import DmaDescriptor
from app.sim.builder import ProgramBuilder
from app.sim.cluster import Cluster


@pytest.fixture(scope="module")
def cfg():
    return load_preset("tiny-32")


@pytest.fixture(scope="module")
def report(cfg):
    """A compute phase on every core, then a transfer nobody overlaps."""
    programs = []
    for c in range(cfg.total_cores):
        b = ProgramBuilder(f"m{c}").mark("compute")
        for i in range(16):
            b.op(1 + i % 8, "addi", 0, imm=i)
        b.mark("copy").barrier(0)
        if c == 0:
            b.dma_start(DmaDescriptor(src=0, dst=0, bytes_per_row=512)).dma_wait()
        programs.append(b.barrier(1).halt().build())
    result = Cluster(cfg).run(programs)
    return MetricsCalculator.build_report(result, cfg, kernel="micro", seed=4, extras={"marker": 1.5})


def _expect(*checks):
    return {"schema": "clustersim.expectations/1", "checks": list(checks)}


def test_compute_phase_retires_every_cycle(report):
    assert ipc(report, "compute") == 1.0
    assert report.kernels["compute"].ops == 16 * report.config.total_cores
    assert report.accounting_ok


def test_transfer_phase_is_exposed(report):
    copy = report.kernels["copy"]
    assert copy.transfer_cycles > 0
    assert copy.exposed_cycles == copy.transfer_cycles
    assert transfer_overhead(report, "copy") == pytest.approx(copy.exposed_cycles / copy.cycles)
    assert transfer_overhead(report) == pytest.approx(report.total.exposed_cycles / report.cycles)
    assert report.kernels["copy"].stalls.dma_wait > 0


def test_unknown_kernel(report):
    with pytest.raises(KeyError, match="unknown kernel"):
        ipc(report, "nosuch")


def test_ipc_of_empty_kernel_is_zero():
    assert KernelMetrics(name="idle").ipc == 0.0


def test_json_round_trip(report, tmp_path):
    text = emit(report, "json")
    assert json.loads(text)["schema"] == SCHEMA
    assert parse_report(text) == report
    path = tmp_path / "r.json"
    MetricsCalculator.save_report(report, path)
    assert load_report(path) == report


def test_csv_round_trip(report):
    text = emit(report, "csv")
    assert text.startswith(f"# schema: {SCHEMA}")
    back = parse_report(text)
    assert back.kernels == report.kernels
    assert back.total == report.total
    assert back.seed == report.seed
    assert back.extras == report.extras
    assert back.config == report.config


def test_emit_is_deterministic(report):
    assert emit(report, "json") == emit(report, "json")
    assert emit(report, "csv") == emit(report, "csv")


def test_parse_rejects_foreign_documents():
    with pytest.raises(ValueError):
        parse_report("# schema: other/1\nname\n", "csv")
    with pytest.raises(ValueError):
        emit(None, "xml")


def test_tables(report):
    stalls = stall_table(report).splitlines()
    assert stalls[0].startswith("# kernel")
    assert stalls[-1].startswith("total ")
    compute = next(line for line in stalls if line.startswith("compute "))
    row = dict(zip(stalls[0][2:].split(), compute.split()))
    assert float(row["retired"]) == 1.0
    transfers = transfer_table(report).splitlines()
    copy = next(line for line in transfers if line.startswith("copy "))
    _, _, exposed, transfer = copy.split()
    assert int(exposed) == int(transfer) > 0


# ---- expectations -----------------------------------------------------------

def test_expectations_pass_and_fail(report):
    checker = ExpectationChecker.from_source(
        _expect(
            {"metric": "ipc", "kernel": "compute", "comparator": ">=", "threshold": 0.99},
            {"metric": "overhead", "comparator": "<", "threshold": 0.0},
            {"metric": "extras.marker", "comparator": "==", "threshold": 1.5},
            {"metric": "accounting_ok", "comparator": "==", "threshold": 1},
        )
    )
    result = checker.check(report)
    assert [o.passed for o in result.outcomes] == [True, False, True, True]
    assert not result.passed
    assert len(result.failures) == 1
    assert "3/4 expectations met" in result.summary()


def test_wildcard_covers_kernels_with_ops(report):
    result = ExpectationChecker.from_source(_expect({"metric": "ipc", "kernel": "*", "comparator": ">", "threshold": 0.5})).check(report)
    assert [o.kernel for o in result.outcomes] == ["compute"]
    assert result.passed


def test_missing_metric_fails_with_message(report):
    result = ExpectationChecker.from_source(
        _expect(
            {"metric": "nosuch", "comparator": ">", "threshold": 0},
            {"metric": "ipc", "kernel": "fft", "comparator": ">", "threshold": 0},
            {"metric": "latency_hiding_slack", "comparator": ">", "threshold": 0},
        )
    ).check(report)
    assert not any(o.passed for o in result.outcomes)
    assert all(o.value is None and o.message for o in result.outcomes)
    assert "FAIL" in result.outcomes[0].line()


def test_latency_hiding_slack(report):
    slack = report.model_copy(update={"compute_only_cycles": report.cycles - 10, "latency_hiding_bound": 25})
    assert ExpectationChecker.resolve(slack, "latency_hiding_slack") == 15.0


def test_schema_errors(tmp_path):
    with pytest.raises(ExpectationSchemaError):
        load_expectations({"schema": "clustersim.expectations/2", "checks": []})
    with pytest.raises(ExpectationSchemaError, match="comparator"):
        load_expectations(_expect({"metric": "ipc", "comparator": "~", "threshold": 1}))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ExpectationSchemaError, match="line 1"):
        load_expectations(bad)


def test_check_report_saved(report, tmp_path):
    checker = ExpectationChecker.from_source(_expect({"metric": "cycles", "comparator": ">", "threshold": 0}))
    path = tmp_path / "check.json"
    ExpectationChecker.save_report(checker.check(report), path)
    saved = json.loads(path.read_text())
    assert saved["passed"] is True
    assert saved["outcomes"][0]["metric"] == "cycles"
