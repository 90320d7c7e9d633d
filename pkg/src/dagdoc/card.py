"""DAG Cards: self-contained HTML documentation of a flow and its recent runs.

A card is assembled in two stages. ``build_card_model`` gathers everything
from the flow definition and the store; ``render_card`` turns the model into
one HTML file through a list of section providers. The seven built-in
sections always come first, in this order:

    title_menu, description, ownership, structure_params,
    training_info, loss_chart, behavioral_tests

Extra providers (see ``external_section``) are appended after them.
Rendering is byte-deterministic: every map is traversed in sorted order and
no wall-clock time is read. Charts are inline SVG; the card references no
external resource.
"""

from __future__ import annotations

import html
import re
import subprocess
from dataclasses import dataclass, field, replace
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Sequence

from dagdoc.behavior import BehaviorReport, load_report
from dagdoc.errors import (
    DagdocError,
    MalformedFragment,
    ProviderError,
    UnknownFlow,
)
from dagdoc.executor import bind_template, stored_flow
from dagdoc.flowspec import ValidatedFlow, execution_waves, flow_fingerprint, load_flow, validate_dag
from dagdoc.metrics import LocalTracker, MetricSeries
from dagdoc.store import RunRecord, Store

DEFAULT_K = 2
LOSS_METRIC = "loss"
SECTION_IDS = (
    "title_menu",
    "description",
    "ownership",
    "structure_params",
    "training_info",
    "loss_chart",
    "behavioral_tests",
)
CHART_W, CHART_H = 640, 320
PALETTE = ("#d9480f", "#1971c2", "#2f9e44", "#9c36b5", "#e67700", "#0c8599")
_EXTERNAL_REF = re.compile(r"""(?i)https?://|\bsrc\s*=|\bhref\s*=\s*(?!["']?#)""")
_RUN_PART_RE = re.compile(r"<!-- run-derived -->.*?<!-- /run-derived -->", re.S)
_SECTION_RE = re.compile(r"<!-- section:([A-Za-z0-9_-]+) -->\n(.*?)<!-- /section:\1 -->", re.S)

CSS = """\
body { font: 14px/1.45 -apple-system, "Segoe UI", Helvetica, Arial, sans-serif; color: #1f2933; background: #f5f7fa; margin: 0; }
main { max-width: 1100px; margin: 0 auto; padding: 24px; }
.card-section { background: #fff; border-radius: 8px; padding: 16px 20px; margin-bottom: 16px; border-left: 6px solid #adb5bd; }
.flow-level { border-left-color: #2f9e44; }
.run-level { border-left-color: #e8590c; }
div.run-level { border-left: 4px solid #e8590c; padding-left: 10px; margin-top: 12px; }
h1 { margin: 0 0 8px; font-size: 26px; }
h2 { margin: 0 0 12px; font-size: 19px; }
h3 { margin: 12px 0 6px; font-size: 15px; }
nav a { margin-right: 14px; color: #1864ab; text-decoration: none; }
table { border-collapse: collapse; margin: 6px 0; }
th, td { border-bottom: 1px solid #dee2e6; padding: 4px 10px; text-align: left; vertical-align: top; }
pre { background: #f1f3f5; padding: 8px 10px; border-radius: 4px; white-space: pre-wrap; }
code, .mono { font-family: Menlo, Consolas, monospace; font-size: 12px; }
.placeholder { color: #868e96; font-style: italic; }
.columns { display: flex; gap: 24px; flex-wrap: wrap; }
.run-column { flex: 1 1 300px; }
.banner { font-weight: bold; padding: 6px 10px; border-radius: 4px; background: #e7f5ff; display: inline-block; }
.banner.has-failures { background: #fff0f6; }
.status-pass, .status-success { color: #2b8a3e; }
.status-fail, .status-failed { color: #c92a2a; }
.status-error, .status-skipped_upstream_failed { color: #e67700; }
svg text { font: 12px sans-serif; fill: #343a40; }
svg .node rect { fill: #fff; stroke: #495057; stroke-width: 1.5; }
svg .node.resource rect { fill: #d0ebff; stroke: #1971c2; }
svg .node .marker { fill: #1971c2; font-weight: bold; }
svg .parallel-group { fill: #fff5f5; stroke: #e03131; stroke-dasharray: 4 3; }
svg .edge { stroke: #868e96; stroke-width: 1.2; fill: none; }
svg .bar { fill: #2f9e44; }
svg .axis { stroke: #495057; stroke-width: 1; }
svg .grid { stroke: #e9ecef; stroke-width: 1; }
svg .series { fill: none; stroke-width: 2; }
"""


_LINKISH = re.compile(r"(?i)\b(src|href)(\s*)=")


def esc(text: str) -> str:
    """HTML-escape user text; also defuse ``://`` and ``src=``/``href=`` so text never looks like a link."""
    text = html.escape(str(text), quote=True).replace("://", "&#58;//")
    return _LINKISH.sub(r"\1\2&#61;", text)


def fmt(value: float) -> str:
    return f"{value:.6g}"


def placeholder(text: str) -> str:
    return f'<p class="placeholder">{esc(text)}</p>'


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class CardModel:
    flow: ValidatedFlow
    fingerprint: str
    k: int
    selected_runs: list[RunRecord]
    all_runs: list[RunRecord]
    ownership: list[tuple[str, int]]
    loss_series: dict[str, MetricSeries] = field(default_factory=dict)
    final_metrics: dict[str, list[tuple[str, str, float, int]]] = field(default_factory=dict)
    summaries: dict[str, str | None] = field(default_factory=dict)
    behavior_reports: dict[str, BehaviorReport | None] = field(default_factory=dict)
    store: Store | None = None
    menu: list[tuple[str, str]] = field(default_factory=list)

    @property
    def flow_name(self) -> str:
        return self.flow.name

    @property
    def doc(self) -> str:
        return self.flow.spec.doc

    @property
    def sections(self) -> tuple[str, ...]:
        return SECTION_IDS

    @property
    def scope(self) -> str:
        ids = ",".join(r.run_id for r in self.selected_runs)
        return f"last-{self.k}:{ids}" if ids else f"last-{self.k}:none"


def ownership_tally(runs: Sequence[RunRecord]) -> list[tuple[str, int]]:
    counts: dict[str, int] = {}
    for r in runs:
        counts[r.user] = counts.get(r.user, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def _summary(store: Store, flow: ValidatedFlow, run: RunRecord) -> str | None:
    for name in flow.order:
        task = run.tasks.get(name)
        ref = task.artifact("summary") if task else None
        if ref is not None:
            return store.get_object(ref.object).decode("utf-8", errors="replace")
    return None


def build_card_model(flow: ValidatedFlow, store: Store, k: int = DEFAULT_K) -> CardModel:
    """Collect flow-level facts and the last ``k`` completed runs' data."""
    if k < 1:
        raise ValueError("k must be >= 1")
    all_runs = store.list_runs(flow.name)
    selected = [r for r in all_runs if r.completed][:k]
    tracker = LocalTracker(store)
    model = CardModel(
        flow=flow,
        fingerprint=flow_fingerprint(flow).digest,
        k=k,
        selected_runs=selected,
        all_runs=all_runs,
        ownership=ownership_tally(all_runs),
        store=store,
    )
    for run in selected:
        series = tracker.fetch_series(f"{flow.name}/{run.run_id}")
        model.final_metrics[run.run_id] = [(s.step, s.name, s.last, len(s.points)) for s in series]
        for s in series:
            if s.name == LOSS_METRIC:
                model.loss_series[run.run_id] = s
                break
        model.summaries[run.run_id] = _summary(store, flow, run)
        model.behavior_reports[run.run_id] = load_report(store, flow.name, run.run_id)
    return model


def resolve_flow(store: Store, name_or_path: str | Path) -> ValidatedFlow:
    """A flow file path, or the name of a flow with runs in the store."""
    path = Path(name_or_path)
    if path.is_file():
        return validate_dag(load_flow(path))
    name = str(name_or_path)
    runs = store.list_runs(name) if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", name) else []
    if not runs:
        raise UnknownFlow(f"no flow file or stored flow named {name!r}")
    return stored_flow(store, runs[0])


# --------------------------------------------------------------------------
# Section renderers
# --------------------------------------------------------------------------


def render_title_menu(model: CardModel) -> str:
    links = "".join(f'<a href="#{sid}">{esc(title)}</a>' for sid, title in model.menu)
    return (
        f"<h1>DAG Card: {esc(model.flow_name)}</h1>\n"
        f'<p class="mono">flow fingerprint sha256:{model.fingerprint}</p>\n'
        f"<nav>{links}</nav>\n"
    )


def render_description(flow: ValidatedFlow) -> str:
    if not flow.spec.doc.strip():
        return placeholder("No description provided for this flow.")
    paras = "".join(f"<p>{esc(p)}</p>" for p in flow.spec.doc.split("\n"))
    return paras + "\n"


def run_derived(fragment: str) -> str:
    """Mark part of a flow-level section as computed from runs rather than the flow file."""
    return f"<!-- run-derived -->\n{fragment.rstrip()}\n<!-- /run-derived -->\n"


def render_ownership(runs: Sequence[RunRecord]) -> str:
    return run_derived(_ownership_body(runs))


def _ownership_body(runs: Sequence[RunRecord]) -> str:
    tally = ownership_tally(runs)
    if not tally:
        return placeholder("no runs yet")
    top = tally[0][1]
    bar_w, gap, max_h = 48, 24, 120
    width = 40 + len(tally) * (bar_w + gap)
    height = max_h + 60
    parts = [f'<svg class="ownership-chart" width="{width}" height="{height}" viewBox="0 0 {width} {height}" role="img">']
    total = sum(c for _, c in tally)
    for i, (user, count) in enumerate(tally):
        h = max_h * count / top
        x = 30 + i * (bar_w + gap)
        y = 20 + max_h - h
        parts.append(
            f'<rect class="bar" data-user="{esc(user)}" data-count="{count}" x="{x}" y="{y:.2f}" width="{bar_w}" height="{h:.2f}"></rect>'
        )
        parts.append(f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.2f}" text-anchor="middle">{count}</text>')
        parts.append(f'<text x="{x + bar_w / 2:.1f}" y="{20 + max_h + 18}" text-anchor="middle">{esc(user)}</text>')
    parts.append("</svg>")
    rows = "".join(
        f"<tr><td>{esc(u)}</td><td>{c}</td><td>{100 * c / total:.1f}%</td></tr>" for u, c in tally
    )
    table = f"<table><thead><tr><th>User</th><th>Runs</th><th>Share</th></tr></thead><tbody>{rows}</tbody></table>"
    return "\n".join(parts) + "\n" + table + "\n"


def render_dag_svg(flow: ValidatedFlow) -> str:
    waves = execution_waves(flow)
    col_w, node_w, node_h, row_h, pad = 190, 150, 34, 56, 20
    pos: dict[str, tuple[float, float]] = {}
    for c, wave in enumerate(waves):
        for r, name in enumerate(wave):
            pos[name] = (pad + 10 + c * col_w, pad + 10 + r * row_h)
    rows = max((len(w) for w in waves), default=1)
    width = 2 * pad + 20 + max(len(waves), 1) * col_w - (col_w - node_w)
    height = 2 * pad + 20 + rows * row_h - (row_h - node_h)
    out = [f'<svg class="dag" width="{width}" height="{height}" viewBox="0 0 {width} {height}" role="img">']
    for c, wave in enumerate(waves):
        if len(wave) > 1:
            x0 = pad + c * col_w
            out.append(
                f'<rect class="parallel-group" data-wave="{c}" x="{x0}" y="{pad}" width="{node_w + 20}" '
                f'height="{len(wave) * row_h - (row_h - node_h) + 20}" rx="6"></rect>'
            )
    for name in flow.order:
        x1, y1 = pos[name]
        for pred in sorted(flow.predecessors(name)):
            x0, y0 = pos[pred]
            out.append(
                f'<line class="edge" data-from="{esc(pred)}" data-to="{esc(name)}" x1="{x0 + node_w}" '
                f'y1="{y0 + node_h / 2:.1f}" x2="{x1}" y2="{y1 + node_h / 2:.1f}"></line>'
            )
    for c, wave in enumerate(waves):
        cls = "wave parallel" if len(wave) > 1 else "wave"
        out.append(f'<g class="{cls}" data-wave="{c}">')
        for name in wave:
            step = flow.step(name)
            x, y = pos[name]
            classes = ["node"]
            if step.resources:
                classes.append("resource")
                classes += [f"resource-{esc(r)}" for r in step.resources]
            out.append(f'<g class="{" ".join(classes)}" data-step="{esc(name)}">')
            out.append(f'<rect x="{x}" y="{y}" width="{node_w}" height="{node_h}" rx="4"></rect>')
            out.append(f'<text x="{x + 8}" y="{y + 21}">{esc(name)}</text>')
            if step.resources:
                tags = ",".join(step.resources)
                out.append(f'<text class="marker" x="{x + node_w - 6}" y="{y + 21}" text-anchor="end">[{esc(tags)}]</text>')
            out.append("</g>")
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out)


def render_structure_params(flow: ValidatedFlow, selected_runs: Sequence[RunRecord]) -> str:
    spec = flow.spec
    parts = ['<div class="flow-part">', render_dag_svg(flow)]
    parts.append(
        '<p class="legend">Columns are execution waves; dashed red groups run in parallel; '
        "blue nodes carry resource tags.</p>"
    )
    step_rows = "".join(
        f"<tr><td><code>{esc(s.name)}</code></td><td>{esc(', '.join(s.after)) or '&#8212;'}</td>"
        f"<td>{esc(', '.join(s.resources)) or '&#8212;'}</td><td>{esc(s.doc)}</td></tr>"
        for s in (flow.step(n) for n in flow.order)
    )
    parts.append(
        "<h3>Steps</h3><table><thead><tr><th>Step</th><th>After</th><th>Resources</th><th>Doc</th></tr></thead>"
        f"<tbody>{step_rows}</tbody></table>"
    )
    if spec.params:
        rows = "".join(
            f"<tr><td><code>{esc(p.name)}</code></td><td>{p.kind}</td>"
            f"<td>{esc(p.default) if p.default is not None else '<em>required</em>'}</td></tr>"
            for p in spec.params
        )
        parts.append(f"<h3>Parameters</h3><table><thead><tr><th>Name</th><th>Kind</th><th>Default</th></tr></thead><tbody>{rows}</tbody></table>")
    else:
        parts.append("<h3>Parameters</h3>" + placeholder("This flow declares no parameters."))
    if spec.inputs:
        rows = "".join(f"<tr><td><code>{esc(i.name)}</code></td><td><code>{esc(i.path)}</code></td></tr>" for i in spec.inputs)
        parts.append(f"<h3>Input files</h3><table><thead><tr><th>Name</th><th>Path</th></tr></thead><tbody>{rows}</tbody></table>")
    else:
        parts.append("<h3>Input files</h3>" + placeholder("This flow declares no input files."))
    parts.append("</div>")

    parts.append("<!-- run-derived -->")
    parts.append('<div class="run-level">')
    if not selected_runs:
        parts.append(placeholder("No completed runs to show bound values for."))
    else:
        head = "".join(f"<th>run {r.run_id}</th>" for r in selected_runs)
        if spec.params:
            rows = "".join(
                f"<tr><td><code>{esc(p.name)}</code></td><td>{esc(p.default) if p.default is not None else ''}</td>"
                + "".join(f"<td>{esc(r.param_bindings.get(p.name, ''))}</td>" for r in selected_runs)
                + "</tr>"
                for p in spec.params
            )
            parts.append(
                f"<h3>Bound parameter values</h3><table><thead><tr><th>Name</th><th>Default</th>{head}</tr></thead><tbody>{rows}</tbody></table>"
            )
        if spec.inputs:
            rows = "".join(
                f"<tr><td><code>{esc(i.name)}</code></td>"
                + "".join(
                    f'<td class="mono">{r.input_bindings[i.name].object if i.name in r.input_bindings else ""}</td>'
                    for r in selected_runs
                )
                + "</tr>"
                for i in spec.inputs
            )
            parts.append(
                f"<h3>Input snapshots</h3><table><thead><tr><th>Input</th>{head}</tr></thead><tbody>{rows}</tbody></table>"
            )
    parts.append("</div>")
    parts.append("<!-- /run-derived -->")
    return "\n".join(parts) + "\n"


def render_run_table(runs: Sequence[RunRecord]) -> str:
    rows = "".join(
        f'<tr><td>{r.run_id}</td><td class="status-{r.status}">{r.status}</td><td>{esc(r.user)}</td>'
        f"<td>{r.started_at}</td><td>{r.finished_at or ''}</td><td>{r.resume_count}</td></tr>"
        for r in runs
    )
    return (
        "<table><thead><tr><th>Run</th><th>Status</th><th>User</th><th>Started</th><th>Finished</th>"
        f"<th>Resumes</th></tr></thead><tbody>{rows}</tbody></table>"
    )


def render_training_info(
    selected_runs: Sequence[RunRecord],
    final_metrics: dict[str, list[tuple[str, str, float, int]]],
    summaries: dict[str, str | None],
) -> str:
    if not selected_runs:
        return placeholder("No completed runs yet.")
    parts = [render_run_table(selected_runs), '<div class="columns">']
    for run in selected_runs:
        parts.append(f'<div class="run-column" data-run="{run.run_id}">')
        parts.append(f"<h3>Run {run.run_id}</h3>")
        metrics = final_metrics.get(run.run_id) or []
        if metrics:
            rows = "".join(
                f"<tr><td>{esc(step)}</td><td>{esc(name)}</td><td>{fmt(value)}</td><td>{n}</td></tr>"
                for step, name, value, n in sorted(metrics)
            )
            parts.append(
                f"<table><thead><tr><th>Step</th><th>Metric</th><th>Final</th><th>Points</th></tr></thead><tbody>{rows}</tbody></table>"
            )
        else:
            parts.append(placeholder("no metrics recorded"))
        summary = summaries.get(run.run_id)
        if summary is None:
            parts.append(placeholder("no architecture summary artifact"))
        else:
            parts.append(f'<pre class="summary">{esc(summary)}</pre>')
        parts.append("</div>")
    parts.append("</div>")
    return "\n".join(parts) + "\n"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_loss_chart(series: dict[str, MetricSeries], run_order: Sequence[str] | None = None) -> str:
    """One polyline per run over shared linear axes in a 640x320 viewport."""
    run_order = list(run_order) if run_order is not None else sorted(series, reverse=True)
    present = [(rid, series[rid]) for rid in run_order if rid in series and series[rid].points]
    if not present:
        return placeholder("no metrics recorded")
    xs = [p.epoch for _, s in present for p in s.points]
    ys = [p.value for _, s in present for p in s.points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    if y_hi == y_lo:
        pad = abs(y_lo) * 0.1 or 1.0
        y_lo, y_hi = y_lo - pad, y_hi + pad
    left, right, top, bottom = 64, 16, 16, 44
    pw, ph = CHART_W - left - right, CHART_H - top - bottom

    def sx(v: float) -> float:
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v: float) -> float:
        return top + (1 - (v - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg class="loss-chart" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}" role="img">']
    for t in _ticks(y_lo, y_hi):
        y = sy(t)
        out.append(f'<line class="grid" x1="{left}" y1="{y:.2f}" x2="{CHART_W - right}" y2="{y:.2f}"></line>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">{fmt(t)}</text>')
    for t in _ticks(x_lo, x_hi):
        x = sx(t)
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle">{fmt(t)}</text>')
    out.append(f'<line class="axis" x1="{left}" y1="{top + ph}" x2="{CHART_W - right}" y2="{top + ph}"></line>')
    out.append(f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}"></line>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{CHART_H - 6}" text-anchor="middle">epoch</text>')
    for i, (rid, s) in enumerate(present):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(p.epoch):.2f},{sy(p.value):.2f}" for p in s.points)
        out.append(f'<polyline class="series" data-run="{rid}" stroke="{colour}" points="{pts}"></polyline>')
    out.append("</svg>")
    legend = "".join(
        f'<li data-run="{rid}"><span style="color:{PALETTE[i % len(PALETTE)]}">&#9632;</span> run {rid} '
        f"({len(s.points)} epochs, final {fmt(s.points[-1].value)})</li>"
        for i, (rid, s) in enumerate(present)
    )
    return "\n".join(out) + f'\n<ul class="legend">{legend}</ul>\n'


def render_behavior(selected_runs: Sequence[RunRecord], reports: dict[str, BehaviorReport | None]) -> str:
    if not selected_runs:
        return placeholder("No completed runs yet.")
    parts = []
    for run in selected_runs:
        parts.append(f'<div class="behavior-run" data-run="{run.run_id}"><h3>Run {run.run_id}</h3>')
        report = reports.get(run.run_id)
        if report is None:
            parts.append(placeholder(f"no behavioral test report for run {run.run_id}"))
        else:
            cls = "banner" if report.ok else "banner has-failures"
            parts.append(f'<p class="{cls}">{report.banner()}</p>')
            rows = "".join(
                f'<tr class="status-{r.status}"><td>{esc(r.name)}</td><td>{r.status}</td><td>{esc(r.detail)}</td></tr>'
                for r in report.results
            )
            parts.append(f"<table><thead><tr><th>Case</th><th>Status</th><th>Detail</th></tr></thead><tbody>{rows}</tbody></table>")
        parts.append("</div>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------------------------
# Providers and assembly
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SectionProvider:
    section_id: str
    title: str
    producer: Callable[[CardModel], str]
    level: str = "run"


def default_providers() -> list[SectionProvider]:
    return [
        SectionProvider("title_menu", "Overview", render_title_menu, "flow"),
        SectionProvider("description", "Description", lambda m: render_description(m.flow), "flow"),
        SectionProvider("ownership", "Ownership", lambda m: render_ownership(m.all_runs), "flow"),
        SectionProvider(
            "structure_params", "Structure and parameters",
            lambda m: render_structure_params(m.flow, m.selected_runs), "flow",
        ),
        SectionProvider(
            "training_info", "Model architecture and training",
            lambda m: render_training_info(m.selected_runs, m.final_metrics, m.summaries),
        ),
        SectionProvider(
            "loss_chart", "Loss per epoch",
            lambda m: render_loss_chart(m.loss_series, [r.run_id for r in m.selected_runs]),
        ),
        SectionProvider(
            "behavioral_tests", "Behavioral tests",
            lambda m: render_behavior(m.selected_runs, m.behavior_reports),
        ),
    ]


_VOID = {"area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "source", "track", "wbr"}


class _BalanceChecker(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.stack: list[str] = []
        self.error: str | None = None

    def handle_starttag(self, tag, attrs):
        if tag not in _VOID:
            self.stack.append(tag)

    def handle_endtag(self, tag):
        if self.error or tag in _VOID:
            return
        if not self.stack:
            self.error = f"unexpected </{tag}>"
        elif self.stack[-1] != tag:
            self.error = f"</{tag}> closes <{self.stack[-1]}>"
        else:
            self.stack.pop()


def check_fragment(fragment: str) -> None:
    """Raise MalformedFragment unless tags balance and nothing external is referenced."""
    checker = _BalanceChecker()
    checker.feed(fragment)
    checker.close()
    if checker.error:
        raise MalformedFragment(checker.error)
    if checker.stack:
        raise MalformedFragment(f"unclosed <{checker.stack[-1]}>")
    m = _EXTERNAL_REF.search(fragment)
    if m:
        raise MalformedFragment(f"fragment references an external resource near {m.group(0)!r}")


def external_section(section_id: str, command: str, title: str | None = None) -> SectionProvider:
    """A provider whose fragment is the stdout of ``command``.

    Placeholders are bound against the newest selected run, so e.g.
    ``{run.id}`` or ``{artifact.train.model}`` can be handed to a tool that
    fetches data from elsewhere.
    """
    if not re.fullmatch(r"[A-Za-z][A-Za-z0-9_-]*", section_id) or section_id in SECTION_IDS:
        raise ValueError(f"invalid or reserved section id {section_id!r}")

    def produce(model: CardModel) -> str:
        run = model.selected_runs[0] if model.selected_runs else None
        try:
            cmd = bind_template(command, run, model.flow, None, model.store)
        except DagdocError as exc:
            raise ProviderError(f"section {section_id}: {exc}") from exc
        try:
            proc = subprocess.run(cmd, shell=True, stdin=subprocess.DEVNULL, capture_output=True, timeout=120)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProviderError(f"section {section_id}: could not run command: {exc}") from exc
        if proc.returncode != 0:
            raise ProviderError(f"section {section_id}: command exited with code {proc.returncode}")
        fragment = proc.stdout.decode("utf-8", errors="replace")
        check_fragment(fragment)
        return fragment

    return SectionProvider(section_id, title or section_id.replace("_", " ").title(), produce, "run")


def render_card(model: CardModel, providers: Sequence[SectionProvider] | None = None) -> bytes:
    """Render the card as UTF-8 HTML bytes."""
    providers = list(providers) if providers is not None else default_providers()
    ids = [p.section_id for p in providers]
    missing = [s for s in SECTION_IDS if s not in ids]
    if missing:
        raise ProviderError(f"providers missing built-in sections: {', '.join(missing)}")
    if len(set(ids)) != len(ids):
        raise ProviderError("duplicate section ids")
    builtin = {p.section_id: p for p in providers if p.section_id in SECTION_IDS}
    ordered = [builtin[s] for s in SECTION_IDS] + [p for p in providers if p.section_id not in SECTION_IDS]
    model = replace(model, menu=[(p.section_id, p.title) for p in ordered])

    body = []
    for p in ordered:
        try:
            fragment = p.producer(model)
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"section {p.section_id}: {type(exc).__name__}: {exc}") from exc
        check_fragment(fragment)
        heading = "" if p.section_id == "title_menu" else f"<h2>{esc(p.title)}</h2>\n"
        body.append(
            f"<!-- section:{p.section_id} -->\n"
            f'<section id="{p.section_id}" class="card-section {p.level}-level" data-level="{p.level}">\n'
            f"{heading}{fragment.rstrip()}\n</section>\n"
            f"<!-- /section:{p.section_id} -->"
        )
    doc = (
        "<!DOCTYPE html>\n"
        '<html lang="en">\n<head>\n<meta charset="utf-8">\n'
        f"<title>DAG Card: {esc(model.flow_name)}</title>\n"
        f"<style>\n{CSS}</style>\n</head>\n<body>\n<main>\n"
        + "\n".join(body)
        + "\n</main>\n</body>\n</html>\n"
    )
    return doc.encode("utf-8")


def split_sections(document: bytes | str) -> dict[str, str]:
    """Map section id to its rendered HTML, for section-wise comparison of cards."""
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    return {m.group(1): m.group(2) for m in _SECTION_RE.finditer(text)}


def flow_level_view(document: bytes | str) -> dict[str, str]:
    """Flow-level sections with their run-derived parts removed.

    This is what must stay byte-identical while only runs are added.
    """
    text = document.decode("utf-8") if isinstance(document, bytes) else document
    sections = split_sections(text)
    return {
        sid: _RUN_PART_RE.sub("", body)
        for sid, body in sections.items()
        if f'<section id="{sid}" class="card-section flow-level"' in body
    }


def generate_card(
    store: Store,
    flow: ValidatedFlow,
    k: int = DEFAULT_K,
    extra: Sequence[SectionProvider] = (),
    output: str | Path | None = None,
) -> tuple[bytes, str]:
    """Build, render and store a card; optionally write it to ``output``. Returns (html, object id)."""
    model = build_card_model(flow, store, k)
    document = render_card(model, default_providers() + list(extra))
    # write the file first so an unwritable output leaves the store untouched
    if output is not None:
        Path(output).write_bytes(document)
    oid = store.put_card(flow.name, model.scope, document)
    return document, oid

