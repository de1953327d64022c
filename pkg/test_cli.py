import json

import pytest

from app.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from app.metrics import load_report

TINY = ["--preset", "tiny-32"]


@pytest.fixture
def fft_report(tmp_path):
    out = tmp_path / "fft.json"
    assert main(["run", *TINY, "--kernel", "fft", "--impulse", "--out", str(out)]) == EXIT_OK
    return out


def _expectations(tmp_path, *checks):
    path = tmp_path / "expect.json"
    path.write_text(json.dumps({"schema": "clustersim.expectations/1", "checks": list(checks)}))
    return str(path)


def test_presets_list(capsys):
    assert main(["presets"]) == EXIT_OK
    names = capsys.readouterr().out.split()
    assert "tiny-32" in names
    assert "terapool-1-3-5-9" in names


def test_preset_show(capsys):
    assert main(["presets", "tiny-32"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["cores_per_tile"] == 4


def test_unknown_preset(capsys):
    assert main(["presets", "nosuch"]) == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


def test_run_writes_report_and_tables(fft_report, capsys):
    report = load_report(fft_report)
    assert report.kernel == "fft"
    assert report.memory.passed
    stem = fft_report.with_suffix("")
    for suffix in (".diff.txt", ".stalls.dat", ".transfers.dat"):
        assert (stem.parent / f"{stem.name}{suffix}").exists()
    assert "PASS" in (stem.parent / f"{stem.name}.diff.txt").read_text()


def test_run_emits_csv_to_stdout(capsys):
    assert main(["run", *TINY, "--kernel", "compute", "--emit", "csv"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "# schema: clustersim.metrics/1" in out


def test_run_with_workload_overrides(capsys):
    argv = ["run", *TINY, "--kernel", "mmse", "--tx", "4", "--subcarriers", "16"]
    assert main(argv) == EXIT_OK
    assert "mmse on tiny-32" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys):
    assert main(["run", "--preset", "tiny-32", "--config", "x.json"]) == EXIT_USAGE
    assert main(["run", *TINY, "--kernel", "nosuch"]) == EXIT_USAGE
    assert main(["run", *TINY, "--bogus-flag"]) == EXIT_USAGE
    assert main(["--log-level", "chatty", "presets"]) == EXIT_USAGE
    assert main(["run", *TINY, "--tx", "9"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "tiny-32", "banks_per_tile": 16, "colour": "blue"}))
    assert main(["run", "--config", str(cfg), "--kernel", "compute"]) == EXIT_USAGE
    assert "unknown key" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_config_file_inherits_preset(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "tiny-32", "scoreboard_depth": 4}))
    assert main(["run", "--config", str(cfg), "--kernel", "compute"]) == EXIT_OK


def test_program_run(tmp_path, capsys):
    prog = tmp_path / "count.s"
    prog.write_text("li r1, 1\namoadd r2, 256(r0), r1\nbarrier 0\n")
    assert main(["run", *TINY, "--kernel", "program", "--program", str(prog)]) == EXIT_OK
    bad = tmp_path / "bad.s"
    bad.write_text("frob r1\n")
    assert main(["run", *TINY, "--kernel", "program", "--program", str(bad)]) == EXIT_USAGE
    assert "line 1" in capsys.readouterr().err


def test_deadlock_exit_status(tmp_path, capsys):
    prog = tmp_path / "dead.s"
    prog.write_text(".active {core < 2}\nbarrier 0\nli r1, {core == 0}\nbeqz r1, done\nbarrier 0\ndone:\nhalt\n")
    assert main(["run", *TINY, "--kernel", "program", "--program", str(prog)]) == EXIT_FAIL
    assert "deadlock at cycle" in capsys.readouterr().err


def test_rejected_dma_exit_status(tmp_path, capsys):
    prog = tmp_path / "fault.s"
    prog.write_text(".active {core == 0}\ndma.start src=0 dst=131040 size=64\ndma.wait\nhalt\n")
    assert main(["run", *TINY, "--kernel", "program", "--program", str(prog)]) == EXIT_FAIL
    assert "rejected" in capsys.readouterr().err


def test_trace_file(tmp_path, capsys):
    trace = tmp_path / "trace.txt"
    assert main(["run", *TINY, "--kernel", "remote", "--trace", str(trace)]) == EXIT_OK
    assert trace.read_text().strip()


def test_sweep_is_monotonic(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", *TINY, "--kernel", "remote", "--out", str(out)]) == EXIT_OK
    table = capsys.readouterr().out
    assert "# monotonic: PASS" in table
    rows = [line.split() for line in table.splitlines() if not line.startswith("#")]
    assert [int(r[0]) for r in rows] == [7, 9, 11]
    assert int(rows[0][1]) < int(rows[-1][1])
    assert (out / "remote-9.json").exists()
    assert (out / "remote-sweep.dat").exists()


def test_sweep_bad_variants(capsys):
    assert main(["sweep", *TINY, "--kernel", "remote", "--variants", "7,x"]) == EXIT_USAGE


def test_check_pass_and_fail(fft_report, tmp_path, capsys):
    ok = _expectations(tmp_path, {"metric": "ipc", "kernel": "*", "comparator": ">", "threshold": 0})
    assert main(["check", str(fft_report), ok, "--out", str(tmp_path / "check.json")]) == EXIT_OK
    assert json.loads((tmp_path / "check.json").read_text())["passed"]
    fail = _expectations(tmp_path, {"metric": "cycles", "comparator": "<", "threshold": 1})
    assert main(["check", str(fft_report), fail]) == EXIT_FAIL
    assert "FAIL" in capsys.readouterr().out


def test_check_schema_errors(fft_report, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "clustersim.expectations/1", "checks": [{"metric": "ipc"}]}))
    assert main(["check", str(fft_report), str(bad)]) == EXIT_USAGE
    not_report = tmp_path / "nr.json"
    not_report.write_text("{}")
    ok = _expectations(tmp_path, {"metric": "cycles", "comparator": ">", "threshold": 0})
    assert main(["check", str(not_report), ok]) == EXIT_USAGE


def test_log_level_from_environment(monkeypatch, capsys):
    monkeypatch.setenv("CLUSTERSIM_LOG_LEVEL", "nonsense")
    assert main(["presets"]) == EXIT_USAGE
    monkeypatch.setenv("CLUSTERSIM_LOG_LEVEL", "debug")
    assert main(["presets"]) == EXIT_OK
