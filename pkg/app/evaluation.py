from __future__ import annotations

import json
import operator
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from app.metrics import TOTAL, KernelMetrics, MetricsReport
from app.models import Expectation, ExpectationsFile

COMPARATORS: Dict[str, Callable[[float, float], bool]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
}
# every kernel that did arithmetic, transfer-only phases excluded
ALL_KERNELS = "*"


class ExpectationSchemaError(ValueError):
    """Expectations document that does not match clustersim.expectations/1."""


@dataclass
class CheckOutcome:
    metric: str
    kernel: Optional[str]
    comparator: str
    threshold: float
    value: Optional[float]
    passed: bool
    note: str = ""
    message: str = ""

    def line(self) -> str:
        where = f"{self.kernel}." if self.kernel else ""
        shown = "n/a" if self.value is None else f"{self.value:.6g}"
        status = "PASS" if self.passed else "FAIL"
        tail = f" ({self.message})" if self.message else ""
        return f"{status} {where}{self.metric} = {shown} {self.comparator} {self.threshold:g}{tail}"


@dataclass
class CheckReport:
    outcomes: List[CheckOutcome]

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    @property
    def failures(self) -> List[CheckOutcome]:
        return [o for o in self.outcomes if not o.passed]

    def summary(self) -> str:
        lines = [o.line() for o in self.outcomes]
        lines.append(f"{len(self.outcomes) - len(self.failures)}/{len(self.outcomes)} expectations met")
        return "\n".join(lines)


def load_expectations(source: str | Path | Dict[str, Any]) -> ExpectationsFile:
    """Parse an expectations document from a path or an already decoded object."""
    if isinstance(source, dict):
        data = source
    else:
        try:
            data = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ExpectationSchemaError(f"{source}: line {e.lineno} column {e.colno}: {e.msg}") from e
    try:
        return ExpectationsFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "document"
        raise ExpectationSchemaError(f"{where}: {first['msg']}") from e


class ExpectationChecker:
    """
    Evaluates expectation lists against metrics reports.

    Metric names are either kernel counters (``ipc``, ``overhead``, ``cycles``, ...),
    looked up for ``kernel`` or the whole run, or dotted report paths such as
    ``hbm.efficiency`` and ``extras.symbol_latency_us``. ``latency_hiding_slack`` is
    the hiding bound minus the cycles the run took beyond its compute-only rerun.
    """

    def __init__(self, expectations: ExpectationsFile):
        self.expectations = expectations

    @classmethod
    def from_source(cls, source: str | Path | Dict[str, Any]) -> "ExpectationChecker":
        return cls(load_expectations(source))

    def check(self, report: MetricsReport) -> CheckReport:
        outcomes: List[CheckOutcome] = []
        for exp in self.expectations.checks:
            if exp.kernel == ALL_KERNELS:
                kernels = [k for k, m in report.kernels.items() if m.ops > 0]
                if not kernels:
                    outcomes.append(self._outcome(exp, None, "report has no compute kernels", kernel=ALL_KERNELS))
                for k in kernels:
                    outcomes.append(self._evaluate(report, exp, k))
            else:
                outcomes.append(self._evaluate(report, exp, exp.kernel))
        return CheckReport(outcomes)

    def _evaluate(self, report: MetricsReport, exp: Expectation, kernel: Optional[str]) -> CheckOutcome:
        try:
            value = self.resolve(report, exp.metric, kernel)
        except KeyError as e:
            return self._outcome(exp, None, str(e).strip("'\""), kernel=kernel)
        return self._outcome(exp, value, kernel=kernel)

    @staticmethod
    def _outcome(exp: Expectation, value: Optional[float], message: str = "", kernel: Optional[str] = None) -> CheckOutcome:
        passed = value is not None and COMPARATORS[exp.comparator](value, exp.threshold)
        return CheckOutcome(exp.metric, kernel, exp.comparator, exp.threshold, value, passed, exp.note, message)

    @staticmethod
    def resolve(report: MetricsReport, metric: str, kernel: Optional[str] = None) -> float:
        if metric == "latency_hiding_slack":
            if report.compute_only_cycles is None or report.latency_hiding_bound is None:
                raise KeyError("report has no compute-only baseline")
            return float(report.latency_hiding_bound - (report.cycles - report.compute_only_cycles))
        if metric in KernelMetrics.model_fields or metric.startswith("stalls."):
            node: Any = report.kernel_metrics(kernel or TOTAL)
        else:
            node = report
        for part in metric.split("."):
            if isinstance(node, dict):
                if part not in node:
                    raise KeyError(f"no metric {metric!r}")
                node = node[part]
            elif hasattr(node, part):
                node = getattr(node, part)
            else:
                raise KeyError(f"no metric {metric!r}")
        if isinstance(node, bool):
            return float(node)
        if not isinstance(node, (int, float)):
            raise KeyError(f"metric {metric!r} is not a number")
        return float(node)

    @staticmethod
    def save_report(report: CheckReport, filepath: str | Path) -> None:
        """Save the pass/fail list to a JSON file."""
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(
                {"passed": report.passed, "outcomes": [asdict(o) for o in report.outcomes]},
                f,
                indent=2,
            )
