"""Black-box behavioral tests against a run's predict entrypoint.

Each case pipes its input to the ``via`` command on stdin and checks stdout
against the expectation. A nonzero exit is an *error* (harness problem), a
failed expectation is a *fail* (behavioral regression).
"""

from __future__ import annotations

import math
import re
import subprocess
from dataclasses import asdict, dataclass, field

from dagdoc.errors import DagdocError, NotRunnable
from dagdoc.executor import bind_template
from dagdoc.flowspec import Expect, ValidatedFlow
from dagdoc.store import RunRecord, Store

OBSERVED_LIMIT = 4096  # bytes of stdout kept in the report
REPORT_FILE = "behavior.json"
DEFAULT_TIMEOUT = 60.0


@dataclass(frozen=True)
class BehaviorResult:
    name: str
    status: str  # pass | fail | error
    observed: str = ""
    detail: str = ""


@dataclass
class BehaviorReport:
    run_id: str
    results: list[BehaviorResult] = field(default_factory=list)

    @property
    def totals(self) -> dict[str, int]:
        counts = {"pass": 0, "fail": 0, "error": 0}
        for r in self.results:
            counts[r.status] += 1
        return counts

    def banner(self) -> str:
        t = self.totals
        return f"{t['pass']} passed, {t['fail']} failed, {t['error']} errors"

    @property
    def ok(self) -> bool:
        t = self.totals
        return t["fail"] == 0 and t["error"] == 0

    def to_dict(self) -> dict:
        return {"run_id": self.run_id, "results": [asdict(r) for r in self.results], "totals": self.totals}

    @classmethod
    def from_dict(cls, d: dict) -> BehaviorReport:
        return cls(d["run_id"], [BehaviorResult(**r) for r in d["results"]])


def evaluate_expectation(expect: Expect, observed: str) -> tuple[bool, str]:
    """Judge ``observed`` against ``expect``; returns (passed, reason)."""
    if expect.kind == "equals":
        got = observed.rstrip("\r\n")
        if got == expect.value:
            return True, ""
        return False, f"expected equals {expect.value!r}, observed {got!r}"
    if expect.kind == "contains":
        if expect.value in observed:
            return True, ""
        return False, f"expected to contain {expect.value!r}, observed {observed!r}"
    if expect.kind == "regex":
        if re.search(expect.value, observed):
            return True, ""
        return False, f"expected to match /{expect.value}/, observed {observed!r}"
    if expect.kind == "approx":
        try:
            got = float(observed.strip())
        except ValueError:
            return False, f"ParseFailure: observed {observed.strip()!r} is not a number (expected {expect.value:g} ± {expect.tol:g})"
        if math.isfinite(got) and abs(got - expect.value) <= expect.tol:
            return True, ""
        return False, f"expected {expect.value:g} ± {expect.tol:g}, observed {got:g}"
    raise ValueError(f"unknown expectation kind {expect.kind!r}")


def run_behavior_suite(
    flow: ValidatedFlow, run: RunRecord, store: Store, timeout: float = DEFAULT_TIMEOUT
) -> BehaviorReport:
    """Run every behavior case of ``flow`` in file order and persist the report with the run."""
    if run.status != "success":
        raise NotRunnable(f"run {run.run_id} has status {run.status!r}; behavioral tests need a successful run")
    report = BehaviorReport(run.run_id)
    for case in flow.spec.behaviors:
        report.results.append(_run_case(case, flow, run, store, timeout))
    store.save_json(run.flow_name, run.run_id, REPORT_FILE, report.to_dict())
    return report


def _run_case(case, flow, run, store, timeout) -> BehaviorResult:
    try:
        command = bind_template(case.via, run, flow, None, store)
    except DagdocError as exc:
        return BehaviorResult(case.name, "error", "", f"could not resolve entrypoint: {exc}")
    try:
        proc = subprocess.run(
            command,
            shell=True,
            input=case.input.encode("utf-8"),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        return BehaviorResult(case.name, "error", "", f"entrypoint timed out after {timeout:g}s")
    except OSError as exc:
        return BehaviorResult(case.name, "error", "", f"could not start entrypoint: {exc}")
    observed = proc.stdout.decode("utf-8", errors="replace")
    # cut at a byte budget; a multi-byte character split by the cut is dropped
    stored = proc.stdout[:OBSERVED_LIMIT].decode("utf-8", errors="ignore")
    if proc.returncode != 0:
        stderr = proc.stderr.decode("utf-8", errors="replace").strip()[:500]
        detail = f"entrypoint exited with code {proc.returncode}"
        if stderr:
            detail += f": {stderr}"
        return BehaviorResult(case.name, "error", stored, detail)
    passed, reason = evaluate_expectation(case.expect, observed)
    return BehaviorResult(case.name, "pass" if passed else "fail", stored, reason)


def load_report(store: Store, flow_name: str, run_id: str) -> BehaviorReport | None:
    data = store.load_json(flow_name, run_id, REPORT_FILE)
    return BehaviorReport.from_dict(data) if data else None
