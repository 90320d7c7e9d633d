"""Per-epoch metrics: NDJSON ingestion, series lookup and the tracker adapter.

Tasks append one JSON object per line to the file named by ``DAGDOC_METRICS``::

    {"epoch": 0, "name": "loss", "value": 27.67}
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Protocol

from dagdoc.errors import MalformedLine


class DuplicateEpochWarning(UserWarning):
    """An epoch appeared twice for one metric; the last value was kept."""


@dataclass(frozen=True)
class MetricPoint:
    epoch: int
    name: str
    value: float


@dataclass(frozen=True)
class MetricSeries:
    run_id: str
    step: str
    name: str
    points: tuple[MetricPoint, ...]

    @property
    def epochs(self) -> list[int]:
        return [p.epoch for p in self.points]

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]

    @property
    def last(self) -> float | None:
        return self.points[-1].value if self.points else None


def _parse_line(text: str, lineno: int) -> MetricPoint:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedLine(lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedLine(lineno, "expected a JSON object")
    missing = {"epoch", "name", "value"} - obj.keys()
    if missing:
        raise MalformedLine(lineno, f"missing keys: {', '.join(sorted(missing))}")
    epoch, name, value = obj["epoch"], obj["name"], obj["value"]
    if isinstance(epoch, bool) or not isinstance(epoch, int) or epoch < 0:
        raise MalformedLine(lineno, "epoch must be a non-negative integer")
    if not isinstance(name, str) or not name:
        raise MalformedLine(lineno, "name must be non-empty text")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MalformedLine(lineno, "value must be a number")
    if not math.isfinite(value):
        raise MalformedLine(lineno, f"value {value!r} is not finite")
    return MetricPoint(epoch, name, float(value))


def ingest_metrics_file(data: bytes, run_id: str, step: str) -> list[MetricSeries]:
    """Parse a metrics NDJSON blob into one series per metric name.

    Series come back sorted by name, points by epoch. The whole blob is
    rejected on the first malformed line.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedLine(data.count(b"\n", 0, exc.start) + 1, "not UTF-8") from None
    by_name: dict[str, dict[int, float]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        point = _parse_line(line, lineno)
        series = by_name.setdefault(point.name, {})
        if point.epoch in series:
            warnings.warn(
                f"{step}: duplicate epoch {point.epoch} for {point.name!r} (line {lineno}); keeping last",
                DuplicateEpochWarning,
                stacklevel=2,
            )
        series[point.epoch] = point.value
    return [
        MetricSeries(
            run_id,
            step,
            name,
            tuple(MetricPoint(e, name, v) for e, v in sorted(points.items())),
        )
        for name, points in sorted(by_name.items())
    ]


def serialize_series(series: Iterable[MetricSeries]) -> bytes:
    lines = []
    for s in series:
        for p in s.points:
            lines.append(json.dumps({"epoch": p.epoch, "name": s.name, "value": p.value}, sort_keys=True))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


class TrackerAdapter(Protocol):
    """Source of metric series keyed by an external run key.

    Implementations may wrap a third-party experiment tracker; the key is
    whatever that tracker uses to identify a run.
    """

    def fetch_series(self, run_key: str) -> list[MetricSeries]: ...


class LocalTracker:
    """Tracker backed by the metrics objects a run's tasks stored.

    Run keys are ``"<flow>/<run_id>"``.
    """

    def __init__(self, store):
        self.store = store

    def fetch_series(self, run_key: str) -> list[MetricSeries]:
        flow_name, _, run_id = run_key.partition("/")
        run = self.store.load_run(flow_name, run_id)
        out: list[MetricSeries] = []
        for step, task in run.tasks.items():
            if task.metrics:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DuplicateEpochWarning)
                    out.extend(ingest_metrics_file(self.store.get_object(task.metrics), run_id, step))
        return out


def series_for_runs(
    store, flow_name: str, run_ids: Iterable[str], metric: str, tracker: TrackerAdapter | None = None
) -> dict[str, MetricSeries]:
    """Map each run id to its ``metric`` series; runs without it are left out.

    When several steps record the same metric, the first step in the run's
    topological order wins.
    """
    tracker = tracker or LocalTracker(store)
    found: dict[str, MetricSeries] = {}
    for run_id in run_ids:
        for s in tracker.fetch_series(f"{flow_name}/{run_id}"):
            if s.name == metric:
                found[run_id] = s
                break
    return found
