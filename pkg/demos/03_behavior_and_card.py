# Run the behavioral checks against the latest model and render the card.
from __future__ import annotations

import tempfile
from pathlib import Path

from dagdoc import example_flow_path
from dagdoc.behavior import run_behavior_suite
from dagdoc.card import external_section, generate_card, split_sections
from dagdoc.executor import execute_run
from dagdoc.flowspec import load_flow, validate_dag
from dagdoc.store import Store

workdir = Path(tempfile.mkdtemp(prefix="dagdoc-card-"))
store = Store(workdir / ".dagdoc")
flow = validate_dag(load_flow(example_flow_path()))
base = example_flow_path().parent

# two runs by different people with different settings
execute_run(store, flow, {"epochs": "60", "lr": "0.02"}, user="ana", base_dir=base)
latest = execute_run(store, flow, user="ben", base_dir=base)

report = run_behavior_suite(flow, latest, store)
for r in report.results:
    print(f"{r.status:5} {r.name:32} observed={r.observed.strip()!r}")
print(report.banner())

# extra sections come from any command that prints an HTML fragment
notes = external_section("notes", "echo '<p>Model owner on call: ben (run {run.id})</p>'", "Notes")

html, oid = generate_card(store, flow, extra=[notes], output=workdir / "card.html")
print("\ncard object", oid[:16], "written to", workdir / "card.html")
for sid, body in split_sections(html).items():
    print(f"  {sid:17} {len(body):6d} bytes")
