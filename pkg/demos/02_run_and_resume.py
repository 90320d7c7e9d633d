# Execute the example flow, inspect what was snapshotted, then break a step and resume.
from __future__ import annotations

import tempfile
import textwrap
from pathlib import Path

from dagdoc import example_flow_path
from dagdoc.executor import execute_run, resume_run
from dagdoc.flowspec import load_flow, parse_flow, validate_dag
from dagdoc.metrics import series_for_runs
from dagdoc.store import Store

workdir = Path(tempfile.mkdtemp(prefix="dagdoc-demo-"))
store = Store(workdir / ".dagdoc")
flow = validate_dag(load_flow(example_flow_path()))

# inputs are resolved relative to the flow file and copied into the store up front
run = execute_run(store, flow, {"epochs": "200"}, user="ana", base_dir=example_flow_path().parent)
print("run", run.run_id, run.status)
for name, task in run.tasks.items():
    outs = ", ".join(f"{a.name}={a.object[:12]}" for a in task.artifacts) or "-"
    print(f"  {name:17} {task.status:8} {outs}")

model = run.tasks["train"].artifact("model")
print("model artifact:", store.get_object(model.object).decode().strip())

loss = series_for_runs(store, flow.name, [run.run_id], "loss")[run.run_id]
print(f"loss: {len(loss.points)} epochs, {loss.values[0]:.4g} -> {loss.last:.3g}")

# the same inputs and settings give the same artifact ids
again = execute_run(store, flow, {"epochs": "200"}, user="ben", base_dir=example_flow_path().parent)
print("identical model id:", again.tasks["train"].artifact("model").object == model.object)

# a step that only works once a marker file exists
marker = workdir / "data-ready"
fragile = validate_dag(parse_flow(textwrap.dedent(f"""\
    flow Fragile
    step fetch
      exec "echo 1,3 > pairs.csv; echo 2,5 >> pairs.csv; echo 3,7 >> pairs.csv"
      out pairs "pairs.csv"
    step check after fetch
      exec "test -e {marker} && cp {{artifact.fetch.pairs}} ok.csv"
      out pairs "ok.csv"
    step fit after check
      builtin train_toy data_file={{artifact.check.pairs}} epochs=100 lr=0.05
    """)))

broken = execute_run(store, fragile, parallelism=2)
print("\nfirst attempt:", {n: t.status for n, t in broken.tasks.items()})

marker.touch()
fixed = resume_run(store, "Fragile", broken.run_id)
print("after resume:", {n: t.status for n, t in fixed.tasks.items()})
print("fetch untouched:", fixed.tasks["fetch"] == broken.tasks["fetch"], "| resumes:", fixed.resume_count)
print("\nstore at", store.root)
