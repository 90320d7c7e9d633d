# Parse a flow file, look at its structure, and see what the validator rejects.
from __future__ import annotations

from dagdoc import example_flow_path
from dagdoc.errors import CycleError, FlowError
from dagdoc.flowspec import execution_waves, flow_fingerprint, load_flow, parse_flow, validate_dag

path = example_flow_path()
print(path.read_text())

spec = load_flow(path)
flow = validate_dag(spec)  # checks references and cycles, computes a stable order

print("flow:", flow.name)
print("order:", " -> ".join(flow.order))
for i, wave in enumerate(execution_waves(flow)):
    print(f"wave {i}: {wave}")  # wave 1 holds clean and aggregate: they run side by side

train = flow.step("train")
print("train runs after", train.after, "and is tagged", train.resources)
print("params:", [(p.name, p.kind, p.default) for p in spec.params])

# the fingerprint ignores comments, blank lines and trailing spaces
noisy = path.read_text().replace(
    "step train after prepare_features\n", "# retrain weekly\n\nstep train after prepare_features   \n"
)
print("fingerprint:", flow_fingerprint(flow).digest[:16])
print("same after cosmetic edits:", flow_fingerprint(parse_flow(noisy)) == flow_fingerprint(spec))

# a cycle is reported as a concrete loop of step names
looped = """\
flow Loop
step a after c
  exec "true"
step b after a
  exec "true"
step c after b
  exec "true"
"""
try:
    validate_dag(parse_flow(looped))
except CycleError as exc:
    print("rejected:", " -> ".join(exc.cycle))

# syntax problems carry a line and column
try:
    parse_flow('flow Broken\nparam lr float default fast\nstep a\n  exec "true"\n')
except FlowError as exc:
    print(f"rejected at line {exc.line}, column {exc.column}: {type(exc).__name__}: {exc.message}")
