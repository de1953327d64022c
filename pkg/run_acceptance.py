#!/usr/bin/env python3
"""
Desk-scale acceptance run for the cluster simulator.
Runs the latency, bandwidth, chain and sweep checks and writes every report
under acceptance_results/.
"""

import json
import time
from pathlib import Path

from app.config import VARIANT_FREQUENCY_HZ, default_workload, load_preset
from app.evaluation import ExpectationChecker
from app.kernels.chain import execute_chain
from app.metrics import MetricsCalculator, stall_table, transfer_table
from app.runner import SWEEP_VARIANTS, RunSettings, run_kernel, run_sweep

EXPECTATIONS = {
    "schema": "clustersim.expectations/1",
    "checks": [
        {"metric": "ipc", "kernel": "*", "comparator": ">", "threshold": 0.6, "note": "every kernel above 0.6 IPC"},
        {"metric": "overhead", "comparator": "<", "threshold": 0.09, "note": "exposed transfers under 9%"},
        {"metric": "accounting_ok", "comparator": "==", "threshold": 1},
        {"metric": "memory.passed", "comparator": "==", "threshold": 1},
        {"metric": "latency_hiding_slack", "comparator": ">", "threshold": 0},
    ],
}


class AcceptanceRunner:
    """Run the desk-scale acceptance checks and collect pass/fail lines."""

    def __init__(self, preset: str = "desk-256", results_dir: str = "acceptance_results", seed: int = 1):
        self.cfg = load_preset(preset)
        self.workload = default_workload(self.cfg)
        self.seed = seed
        self.results_dir = Path(results_dir)
        self.results_dir.mkdir(exist_ok=True)
        self.results = {}

    def _banner(self, title: str) -> None:
        print(f"\n{'='*60}")
        print(title)
        print(f"{'='*60}")

    def _record(self, name: str, passed: bool, detail: str) -> None:
        self.results[name] = {"passed": passed, "detail": detail}
        print(f"  {'PASS' if passed else 'FAIL'} {name}: {detail}")

    def check_latency(self):
        """Every (core, bank) pair without contention sees exactly its class latency."""
        self._banner("CHECK 1: Zero-contention latency")
        for v in SWEEP_VARIANTS:
            cfg = self.cfg.with_variant(v, VARIANT_FREQUENCY_HZ.get(v))
            outcome = run_kernel("latency", cfg, self.workload, RunSettings(seed=self.seed))
            for note in outcome.notes:
                print(f"    {note}")
            self._record(f"latency-{v}", outcome.passed, f"classes 1/3/5/{v}")

    def check_l1_throughput(self):
        """Two stream lengths; the extra loads must cost exactly one cycle each."""
        self._banner("CHECK 2: L1 aggregate throughput")
        short = run_kernel("l1-stream", self.cfg, self.workload, RunSettings(options={"loads_per_core": 64}))
        long = run_kernel("l1-stream", self.cfg, self.workload, RunSettings(options={"loads_per_core": 128}))
        extra_cycles = long.report.cycles - short.report.cycles
        extra_bytes = self.cfg.total_cores * 64 * 4
        per_cycle = extra_bytes / extra_cycles if extra_cycles else 0.0
        want = self.cfg.total_cores * 4
        self._record("l1-throughput", per_cycle == want, f"{per_cycle:.1f} B/cycle, expected {want}")

    def check_hbm(self):
        self._banner("CHECK 3: HBM efficiency")
        scrambled = run_kernel("stream", self.cfg, self.workload, RunSettings(seed=self.seed))
        plain = run_kernel("stream", self.cfg, self.workload, RunSettings(seed=self.seed, scramble=False))
        MetricsCalculator.save_report(scrambled.report, self.results_dir / "stream.json")
        eff = scrambled.report.hbm.efficiency
        self._record("hbm-scrambled", eff >= 0.98, f"{eff:.2%} of peak")
        aliased = plain.report.hbm.efficiency
        bound = 1 / self.cfg.hbm.channels
        self._record("hbm-aliased", aliased <= bound, f"{aliased:.2%} of peak, bound {bound:.2%}")

    def check_chain(self):
        """Double-buffered chain: correctness, IPC, overhead and latency hiding."""
        self._banner("CHECK 4-6, 8: PUSCH chain")
        start = time.time()
        run = execute_chain(self.workload, self.cfg, double_buffer=True, seed=self.seed)
        elapsed = time.time() - start
        report = run.report
        print(f"  {report.cycles} cycles, simulated in {elapsed:.1f}s")
        MetricsCalculator.save_report(report, self.results_dir / "chain.json")
        MetricsCalculator.save_report(report, self.results_dir / "chain.csv", "csv")
        (self.results_dir / "chain.stalls.dat").write_text(stall_table(report), encoding="utf-8")
        (self.results_dir / "chain.transfers.dat").write_text(transfer_table(report), encoding="utf-8")
        result = ExpectationChecker.from_source(EXPECTATIONS).check(report)
        ExpectationChecker.save_report(result, self.results_dir / "chain.check.json")
        for outcome in result.outcomes:
            self._record(f"chain {outcome.kernel or 'total'}.{outcome.metric}", outcome.passed, outcome.line())

        serial = execute_chain(self.workload, self.cfg, double_buffer=False, seed=self.seed, compute_only=False)
        MetricsCalculator.save_report(serial.report, self.results_dir / "chain-serial.json")
        self._record(
            "overhead-vs-serialized",
            report.total.overhead <= serial.report.total.overhead,
            f"{report.total.overhead:.4f} double-buffered vs {serial.report.total.overhead:.4f} serialized",
        )

    def check_determinism(self):
        self._banner("CHECK 7: Determinism")
        first = run_kernel("fft", self.cfg, self.workload, RunSettings(seed=self.seed))
        second = run_kernel("fft", self.cfg, self.workload, RunSettings(seed=self.seed))
        same = first.report.model_dump() == second.report.model_dump()
        self._record("determinism", same, f"l1 digest {first.report.memory.l1_digest[:16]}")

    def check_sweep(self):
        self._banner("CHECK 7: Latency-variant monotonicity")
        sweep = run_sweep("chain", self.cfg, self.workload, RunSettings(seed=self.seed))
        (self.results_dir / "chain-sweep.dat").write_text(sweep.table(), encoding="utf-8")
        print(sweep.table(), end="")
        self._record("sweep-chain", sweep.monotonic, " <= ".join(str(r.cycles) for r in sweep.rows))

    def run_all(self) -> bool:
        self.check_latency()
        self.check_l1_throughput()
        self.check_hbm()
        self.check_chain()
        self.check_determinism()
        self.check_sweep()

        passed = all(r["passed"] for r in self.results.values())
        summary = {"preset": self.cfg.name, "seed": self.seed, "passed": passed, "checks": self.results}
        with open(self.results_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)

        self._banner("SUMMARY")
        met = sum(r["passed"] for r in self.results.values())
        print(f"{met}/{len(self.results)} checks passed; results in {self.results_dir}/")
        return passed


if __name__ == "__main__":
    import sys

    sys.exit(0 if AcceptanceRunner().run_all() else 1)
