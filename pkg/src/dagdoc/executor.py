"""Run flows wave by wave, snapshot outputs, and resume failed runs.

The calling thread is the single writer of run metadata. Tasks run on a
thread pool (up to ``parallelism`` at a time) and hand their TaskRecord back
to the caller, which persists it.
"""

from __future__ import annotations

import io
import os
import re
import shlex
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from dagdoc.builtins import BUILTINS
from dagdoc.errors import (
    BadSetting,
    CommandSpawnError,
    DagdocError,
    DegenerateData,
    MalformedLine,
    MissingDeclaredOutput,
    NotResumable,
    UnknownPlaceholder,
    UpstreamNotRun,
)
from dagdoc.flowspec import (
    BuiltinTask,
    ExecTask,
    StepSpec,
    ValidatedFlow,
    execution_waves,
    flow_fingerprint,
    parse_flow,
    validate_dag,
)
from dagdoc.metrics import ingest_metrics_file
from dagdoc.store import ArtifactRef, RunRecord, Store, TaskRecord, utc_now

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)+)\}")

# artifacts a builtin always produces, so templates may reference them
BUILTIN_OUTPUTS = {"train_toy": ("model", "summary")}


@dataclass
class TaskContext:
    run_id: str
    step: str
    workdir: Path
    command: str | None
    env: dict[str, str] = field(default_factory=dict)
    settings: dict[str, str] = field(default_factory=dict)

    @property
    def metrics_path(self) -> Path:
        return Path(self.env["DAGDOC_METRICS"])


def default_parallelism() -> int:
    return os.cpu_count() or 1


def step_outputs(step: StepSpec) -> list[str]:
    names = [n for n, _ in step.outputs]
    if isinstance(step.task, BuiltinTask):
        names += [n for n in BUILTIN_OUTPUTS.get(step.task.name, ()) if n not in names]
    return names


def _materialize(store: Store, run: RunRecord, ref: ArtifactRef, filename: str) -> Path:
    dest = store.run_dir(run.flow_name, run.run_id) / "materialized" / (ref.step or "_inputs") / ref.object[:16] / filename
    return store.materialize(ref.object, dest)


def bind_template(
    template: str,
    run: RunRecord | None,
    flow: ValidatedFlow,
    step: StepSpec | None = None,
    store: Store | None = None,
    *,
    quote: bool = True,
) -> str:
    """Substitute ``{param.N}``, ``{input.N}``, ``{artifact.STEP.NAME}``, ``{run.id}``
    and ``{sys.python}`` in ``template``.

    Input and artifact placeholders resolve to files materialized from the
    store. Paths are shell-quoted when ``quote`` is set. Dotted names outside
    these namespaces raise UnknownPlaceholder rather than passing through.
    """
    ancestors: set[str] | None = None
    if step is not None:
        ancestors = {n for n in flow.order if step.name in flow.descendants(n)}

    def need_run(name: str, pos: int) -> RunRecord:
        if run is None:
            raise UpstreamNotRun(f"{{{name}}} at position {pos} needs a run")
        return run

    def resolve(m: re.Match) -> str:
        name, pos = m.group(1), m.start()
        parts = name.split(".")
        ns = parts[0]
        if ns == "param" and len(parts) == 2:
            r = need_run(name, pos)
            if parts[1] not in r.param_bindings:
                raise UnknownPlaceholder(name, pos)
            return r.param_bindings[parts[1]]
        if ns == "run" and parts[1:] == ["id"]:
            return need_run(name, pos).run_id
        if ns == "sys" and parts[1:] == ["python"]:
            return shlex.quote(sys.executable) if quote else sys.executable
        if ns == "input" and len(parts) == 2:
            try:
                spec = flow.spec.input(parts[1])
            except KeyError:
                raise UnknownPlaceholder(name, pos) from None
            r = need_run(name, pos)
            path = _materialize(store, r, r.input_bindings[spec.name], Path(spec.path).name)
            return shlex.quote(str(path)) if quote else str(path)
        if ns == "artifact" and len(parts) == 3:
            producer, art = parts[1], parts[2]
            try:
                pstep = flow.step(producer)
            except KeyError:
                raise UnknownPlaceholder(name, pos) from None
            if art not in step_outputs(pstep):
                raise UnknownPlaceholder(name, pos)
            if ancestors is not None and producer not in ancestors:
                raise UpstreamNotRun(f"{{{name}}}: step {producer!r} is not upstream of {step.name!r}")
            r = need_run(name, pos)
            task = r.tasks.get(producer)
            if task is None or task.status != "success":
                raise UpstreamNotRun(f"{{{name}}}: step {producer!r} has not succeeded")
            ref = task.artifact(art)
            if ref is None:
                raise UnknownPlaceholder(name, pos)
            declared = dict(pstep.outputs)
            filename = Path(declared.get(art, art)).name
            path = _materialize(store, r, ref, filename)
            return shlex.quote(str(path)) if quote else str(path)
        raise UnknownPlaceholder(name, pos)

    return PLACEHOLDER_RE.sub(resolve, template)


def _inside(root: Path, rel: str) -> Path | None:
    path = (root / rel).resolve()
    return path if root.resolve() in path.parents else None


def execute_task(ctx: TaskContext, step: StepSpec, store: Store) -> TaskRecord:
    """Run one step in ``ctx.workdir`` and snapshot what it produced."""
    record = TaskRecord(step.name, status="running", started_at=utc_now())
    produced: dict[str, str] = {}
    error: str | None = None
    if isinstance(step.task, ExecTask):
        env = dict(os.environ)
        env.update(ctx.env)
        try:
            proc = subprocess.run(
                ctx.command,
                shell=True,
                cwd=ctx.workdir,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
            )
        except OSError as exc:
            raise CommandSpawnError(f"{step.name}: {exc}") from exc
        log = proc.stdout
        record.exit_code = proc.returncode
    else:
        fn = BUILTINS.get(step.task.name)
        buf = io.StringIO()
        if fn is None:
            error = f"unknown builtin {step.task.name!r}"
        else:
            try:
                produced = fn(ctx.settings, ctx.workdir, ctx.metrics_path, buf) or {}
                error = None
            except (BadSetting, DegenerateData, OSError, ValueError) as exc:
                error = f"{type(exc).__name__}: {exc}"
        if error:
            buf.write(error + "\n")
        record.exit_code = 1 if error else 0
        log = buf.getvalue().encode("utf-8")

    record.log = store.put_object(log)
    record.finished_at = utc_now()
    if record.exit_code != 0:
        record.status = "failed"
        record.reason = f"exit code {record.exit_code}"
        if error:
            record.reason += f": {error}"
        return record

    outputs = dict(produced)
    outputs.update(dict(step.outputs))
    for name in sorted(outputs):
        path = _inside(ctx.workdir, outputs[name])
        if path is None or not path.is_file():
            record.status = "failed"
            record.reason = str(MissingDeclaredOutput(f"declared output {name!r} ({outputs[name]}) was not written"))
            record.artifacts = []
            return record
        record.artifacts.append(ArtifactRef(name, step.name, store.put_file(path), path.stat().st_size))

    metrics = ctx.metrics_path
    if metrics.is_file() and metrics.stat().st_size:
        data = metrics.read_bytes()
        try:
            ingest_metrics_file(data, ctx.run_id, step.name)
        except MalformedLine as exc:
            record.status = "failed"
            record.reason = f"malformed metrics file: {exc}"
            return record
        record.metrics = store.put_object(data)
    record.status = "success"
    return record


def _context(store: Store, flow: ValidatedFlow, run: RunRecord, step: StepSpec) -> TaskContext:
    rdir = store.run_dir(run.flow_name, run.run_id)
    workdir = rdir / "work" / step.name
    if workdir.exists():
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True)
    metrics = rdir / "metrics" / f"{step.name}.ndjson"
    metrics.parent.mkdir(parents=True, exist_ok=True)
    metrics.unlink(missing_ok=True)
    env = {"DAGDOC_RUN_ID": run.run_id, "DAGDOC_STEP": step.name, "DAGDOC_METRICS": str(metrics)}
    if isinstance(step.task, ExecTask):
        return TaskContext(run.run_id, step.name, workdir, bind_template(step.task.command, run, flow, step, store), env)
    settings = {k: bind_template(v, run, flow, step, store, quote=False) for k, v in step.task.settings}
    return TaskContext(run.run_id, step.name, workdir, None, env, settings)


def _run_one(store: Store, flow: ValidatedFlow, run: RunRecord, name: str) -> TaskRecord:
    step = flow.step(name)
    try:
        ctx = _context(store, flow, run, step)
        return execute_task(ctx, step, store)
    except DagdocError as exc:
        now = utc_now()
        return TaskRecord(name, status="failed", started_at=now, finished_at=now,
                          reason=f"{type(exc).__name__}: {exc}")


def _parallelism(value: int | None) -> int:
    if value is None:
        return default_parallelism()
    if value < 1:
        raise ValueError(f"parallelism must be >= 1, got {value}")
    return value


def _drive(store: Store, flow: ValidatedFlow, run: RunRecord, parallelism: int) -> RunRecord:
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        for wave in execution_waves(flow):
            todo = []
            for name in wave:
                if run.tasks[name].status != "pending":
                    continue
                if any(run.tasks[p].status != "success" for p in flow.predecessors(name)):
                    store.update_task(run, TaskRecord(name, status="skipped_upstream_failed"))
                    continue
                store.update_task(run, TaskRecord(name, status="running"))
                todo.append(name)
            # workers only compute; this thread persists every result
            futures = [pool.submit(_run_one, store, flow, run, name) for name in todo]
            for fut in futures:
                store.update_task(run, fut.result())
            failed = [n for n in todo if run.tasks[n].status == "failed"]
            if failed:
                for f in failed:
                    for d in sorted(flow.descendants(f)):
                        if run.tasks[d].status == "pending":
                            store.update_task(run, TaskRecord(d, status="skipped_upstream_failed"))
                break
    run.finished_at = utc_now()
    run.recompute_status()
    store.save_run(run)
    return run


def execute_run(
    store: Store,
    flow: ValidatedFlow,
    params: Mapping[str, str] | None = None,
    inputs: Mapping[str, str] | None = None,
    user: str = "unknown",
    parallelism: int | None = None,
    base_dir: str | Path | None = None,
) -> RunRecord:
    """Create a run and execute it; task failures end up in the record, not as exceptions."""
    parallelism = _parallelism(parallelism)
    run = store.create_run(flow, params, inputs, user=user, base_dir=base_dir)
    return _drive(store, flow, run, parallelism)


def stored_flow(store: Store, run: RunRecord) -> ValidatedFlow:
    return validate_dag(parse_flow(store.get_object(run.flow_source).decode("utf-8")))


def _edges(flow: ValidatedFlow) -> set[tuple[str, str]]:
    return {(p, s.name) for s in flow.steps for p in s.after}


def resume_run(
    store: Store,
    flow_name: str,
    run_id: str,
    parallelism: int | None = None,
    flow: ValidatedFlow | None = None,
) -> RunRecord:
    """Re-execute the failed, skipped and never-started tasks of a failed run.

    Successful tasks keep their records and artifacts. By default the flow
    source stored with the run is used; passing ``flow`` lets a fixed flow
    file take over, provided its steps and edges are unchanged.
    """
    parallelism = _parallelism(parallelism)
    run = store.load_run(flow_name, run_id)
    if run.status != "failed":
        raise NotResumable(f"run {run_id} has status {run.status!r}; only failed runs can be resumed")
    original = stored_flow(store, run)
    if flow is None:
        flow = original
    elif set(flow.order) != set(original.order) or _edges(flow) != _edges(original):
        raise NotResumable("flow structure differs from the run's original flow")
    else:
        run.fingerprint = flow_fingerprint(flow).digest
        run.flow_source = store.put_object(flow.spec.source_text.encode("utf-8"))
    for name, task in list(run.tasks.items()):
        if task.status != "success":
            store.reset_task(run, name)
    run.resume_count += 1
    run.finished_at = None
    run.recompute_status()
    store.save_run(run)
    return _drive(store, flow, run, parallelism)
