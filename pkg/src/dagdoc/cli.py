"""``dagdoc`` command line.

Exit codes: 0 success, 1 domain failure (invalid flow, run failed, tests
failed, not found), 2 usage or I/O error. Results go to stdout, diagnostics
to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from dagdoc import __version__
from dagdoc.behavior import run_behavior_suite
from dagdoc.card import DEFAULT_K, external_section, generate_card, resolve_flow
from dagdoc.errors import (
    BindingError,
    DagdocError,
    FlowError,
    MissingInput,
    NotFound,
    NotResumable,
    NotRunnable,
    ProviderError,
    StorageError,
    UnknownFlow,
)
from dagdoc.executor import execute_run, resume_run
from dagdoc.flowspec import execution_waves, load_flow, validate_dag
from dagdoc.store import Store

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _pairs(items: list[str] | None, what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"{what} must look like NAME=VALUE, got {item!r}")
        out[key] = value
    return out


def _store(args) -> Store:
    return Store(args.store or os.environ.get("DAGDOC_STORE") or ".dagdoc")


def _load(path: str):
    """Parse and validate a flow file; FlowError carries the location."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{path}: no such file")
    try:
        return validate_dag(load_flow(p))
    except UnicodeDecodeError as exc:
        raise UsageError(f"{path}: not UTF-8 ({exc.reason})") from None


def _flow_diag(path: str, exc: FlowError) -> str:
    loc = f"{exc.line}:{exc.column}:" if exc.line is not None and exc.column is not None else (
        f"{exc.line}:" if exc.line is not None else "")
    return f"{path}:{loc} {type(exc).__name__}: {exc.message}"


def _resolve(store: Store, target: str):
    if Path(target).is_file():
        return _load(target)
    return resolve_flow(store, target)


def cmd_validate(args) -> int:
    try:
        flow = _load(args.flow)
    except FlowError as exc:
        _err(_flow_diag(args.flow, exc))
        return EXIT_FAIL
    for w in flow.warnings:
        _err(f"{args.flow}: warning: {w}")
    waves = execution_waves(flow)
    print(f"flow {flow.name}: {len(flow.order)} steps, {len(waves)} waves")
    for i, wave in enumerate(waves):
        print(f"  wave {i}: {', '.join(wave)}")
    return EXIT_OK


def _report_failures(run) -> None:
    for name, task in run.tasks.items():
        if task.status == "failed":
            _err(f"step {name} failed: {task.reason or 'unknown reason'}")


def cmd_run(args) -> int:
    params = _pairs(args.param, "--param")
    inputs = _pairs(args.input, "--input")
    if args.parallelism is not None and args.parallelism < 1:
        raise UsageError("--parallelism must be >= 1")
    try:
        flow = _load(args.flow)
    except FlowError as exc:
        _err(_flow_diag(args.flow, exc))
        return EXIT_FAIL
    user = args.user or os.environ.get("DAGDOC_USER") or "unknown"
    store = _store(args)
    try:
        # bindings are checked before anything is written
        store.bind_params(flow, params)
        store.resolve_inputs(flow, inputs, Path(args.flow).parent)
    except (BindingError, MissingInput) as exc:
        raise UsageError(str(exc)) from None
    run = execute_run(store, flow, params, inputs, user=user, parallelism=args.parallelism,
                      base_dir=Path(args.flow).parent)
    print(run.run_id)
    if run.status != "success":
        _report_failures(run)
        _err(f"run {run.run_id} failed")
        return EXIT_FAIL
    return EXIT_OK


def cmd_resume(args) -> int:
    store = _store(args)
    flow = None
    name = args.flow
    if Path(args.flow).is_file():
        try:
            flow = _load(args.flow)
        except FlowError as exc:
            _err(_flow_diag(args.flow, exc))
            return EXIT_FAIL
        name = flow.name
    try:
        run = resume_run(store, name, args.run_id, parallelism=args.parallelism, flow=flow)
    except (NotFound, NotResumable) as exc:
        _err(str(exc))
        return EXIT_FAIL
    print(f"{run.run_id} {run.status}")
    if run.status != "success":
        _report_failures(run)
        return EXIT_FAIL
    return EXIT_OK


def cmd_card(args) -> int:
    if args.last_k < 1:
        raise UsageError("--last-k must be >= 1")
    sections = _pairs(args.section, "--section")
    store = _store(args)
    try:
        flow = _resolve(store, args.flow)
        extra = [external_section(sid, cmd) for sid, cmd in sections.items()]
    except (UnknownFlow, FlowError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        _, oid = generate_card(store, flow, k=args.last_k, extra=extra, output=args.output)
    except ProviderError as exc:
        _err(f"card generation aborted: {exc}")
        return EXIT_FAIL
    print(oid)
    return EXIT_OK


def cmd_test(args) -> int:
    store = _store(args)
    try:
        flow = _resolve(store, args.flow)
    except (UnknownFlow, FlowError) as exc:
        _err(str(exc))
        return EXIT_FAIL
    try:
        if args.run:
            run = store.load_run(flow.name, args.run)
        else:
            run = next((r for r in store.list_runs(flow.name) if r.status == "success"), None)
            if run is None:
                _err(f"flow {flow.name} has no successful run to test")
                return EXIT_FAIL
        report = run_behavior_suite(flow, run, store)
    except (NotFound, NotRunnable) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    for r in report.results:
        line = f"{r.status.upper():5} {r.name}"
        if r.detail:
            line += f" -- {r.detail}"
        print(line)
    print(report.banner())
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_runs(args) -> int:
    store = _store(args)
    name = args.flow
    if Path(args.flow).is_file():
        try:
            name = _load(args.flow).name
        except FlowError as exc:
            _err(_flow_diag(args.flow, exc))
            return EXIT_FAIL
    print(f"{'run_id':8} {'status':8} {'user':16} started_at")
    for run in store.list_runs(name):
        print(f"{run.run_id:8} {run.status:8} {run.user:16} {run.started_at}")
    return EXIT_OK


def cmd_artifact(args) -> int:
    store = _store(args)
    try:
        data = store.get_object(args.object_id)
    except NotFound as exc:
        _err(str(exc))
        return EXIT_FAIL
    sys.stdout.flush()
    sys.stdout.buffer.write(data)
    sys.stdout.buffer.flush()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagdoc", description="Run DAG flows and generate DAG Cards.")
    parser.add_argument("--version", action="version", version=f"dagdoc {__version__}")
    parser.add_argument("--store", help="store root (default: $DAGDOC_STORE or .dagdoc)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and validate a flow file")
    p.add_argument("flow")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a flow")
    p.add_argument("flow")
    p.add_argument("--param", action="append", metavar="NAME=VALUE")
    p.add_argument("--input", action="append", metavar="NAME=PATH")
    p.add_argument("--user")
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="re-execute failed steps of a run")
    p.add_argument("flow", help="flow file or flow name")
    p.add_argument("run_id")
    p.add_argument("--parallelism", type=int)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("card", help="render and store a DAG Card")
    p.add_argument("flow", help="flow file or flow name")
    p.add_argument("--last-k", type=int, default=DEFAULT_K)
    p.add_argument("-o", "--output", default="card.html")
    p.add_argument("--section", action="append", metavar="ID=COMMAND",
                   help="extra section whose HTML is the command's stdout")
    p.set_defaults(func=cmd_card)

    p = sub.add_parser("test", help="run behavioral tests against a successful run")
    p.add_argument("flow", help="flow file or flow name")
    p.add_argument("--run")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("runs", help="list runs, newest first")
    p.add_argument("flow", help="flow file or flow name")
    p.set_defaults(func=cmd_runs)

    p = sub.add_parser("artifact", help="read objects from the store")
    asub = p.add_subparsers(dest="action", required=True)
    g = asub.add_parser("get", help="write an object's bytes to stdout")
    g.add_argument("object_id")
    g.set_defaults(func=cmd_artifact)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        _err(f"dagdoc {args.command}: {exc}")
        return EXIT_USAGE
    except (StorageError, OSError) as exc:
        _err(f"dagdoc {args.command}: I/O error: {exc}")
        return EXIT_USAGE
    except DagdocError as exc:
        _err(f"dagdoc {args.command}: {type(exc).__name__}: {exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
