"""Content-addressed object store and persisted run metadata.

Layout under the store root (``.dagdoc/`` by default)::

    objects/<first2>/<hex>                  raw blobs, named by their SHA-256
    flows/<flow>/counter                    last allocated run id
    flows/<flow>/runs/<run_id>/meta.json    RunRecord
    flows/<flow>/runs/<run_id>/behavior.json
    flows/<flow>/cards.json                 card index

Objects are written to a temporary file and renamed into place, so a reader
never observes a partial object. JSON is written with sorted keys and a
trailing newline.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import re
import shutil
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping

from dagdoc.errors import (
    BindingError,
    IllegalTransition,
    MissingInput,
    NotFound,
    StorageError,
)
from dagdoc.flowspec import ValidatedFlow, check_literal, flow_fingerprint

HEX_RE = re.compile(r"[0-9a-f]{64}\Z")
CHUNK = 1 << 20

TASK_STATES = ("pending", "running", "success", "failed", "skipped_upstream_failed")
RUN_STATES = ("running", "success", "failed")
_TRANSITIONS = {
    "pending": {"running", "skipped_upstream_failed"},
    "running": {"success", "failed"},
    "success": set(),
    "failed": set(),
    "skipped_upstream_failed": set(),
}


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def is_object_id(text: str) -> bool:
    return bool(HEX_RE.match(text))


def dump_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


@dataclass(frozen=True)
class ArtifactRef:
    name: str
    step: str
    object: str
    size_bytes: int


@dataclass
class TaskRecord:
    step: str
    status: str = "pending"
    exit_code: int | None = None
    artifacts: list[ArtifactRef] = field(default_factory=list)
    log: str | None = None
    metrics: str | None = None
    started_at: str | None = None
    finished_at: str | None = None
    reason: str | None = None

    def artifact(self, name: str) -> ArtifactRef | None:
        for ref in self.artifacts:
            if ref.name == name:
                return ref
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> TaskRecord:
        d = dict(d)
        d["artifacts"] = [ArtifactRef(**a) for a in d.get("artifacts", [])]
        return cls(**d)


@dataclass
class RunRecord:
    run_id: str
    flow_name: str
    fingerprint: str
    user: str
    started_at: str
    flow_source: str
    finished_at: str | None = None
    param_bindings: dict[str, str] = field(default_factory=dict)
    input_bindings: dict[str, ArtifactRef] = field(default_factory=dict)
    status: str = "running"
    tasks: dict[str, TaskRecord] = field(default_factory=dict)
    resume_count: int = 0

    def recompute_status(self) -> str:
        states = [t.status for t in self.tasks.values()]
        if states and all(s == "success" for s in states):
            self.status = "success"
        elif any(s in ("failed", "skipped_upstream_failed") for s in states):
            self.status = "failed"
        else:
            self.status = "running"
        return self.status

    @property
    def completed(self) -> bool:
        return self.status in ("success", "failed")

    def artifact(self, step: str, name: str) -> ArtifactRef | None:
        task = self.tasks.get(step)
        return task.artifact(name) if task else None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> RunRecord:
        d = dict(d)
        d["input_bindings"] = {k: ArtifactRef(**v) for k, v in d.get("input_bindings", {}).items()}
        tasks = {k: TaskRecord.from_dict(v) for k, v in d.get("tasks", {}).items()}
        order = d.pop("task_order", None) or list(tasks)
        d["tasks"] = {k: tasks[k] for k in order if k in tasks}
        return cls(**d)


class Store:
    """A directory-backed, write-once object store plus run bookkeeping."""

    def __init__(self, root: str | Path = ".dagdoc"):
        self.root = Path(root).absolute()
        self._lock = threading.Lock()

    # -- objects ---------------------------------------------------------

    def object_path(self, oid: str) -> Path:
        return self.root / "objects" / oid[:2] / oid

    def has_object(self, oid: str) -> bool:
        return is_object_id(oid) and self.object_path(oid).is_file()

    def _commit(self, tmp: Path, oid: str) -> None:
        dest = self.object_path(oid)
        if dest.exists():
            tmp.unlink(missing_ok=True)
            return
        dest.parent.mkdir(parents=True, exist_ok=True)
        os.replace(tmp, dest)

    def _tempfile(self):
        tmpdir = self.root / "objects" / "tmp"
        tmpdir.mkdir(parents=True, exist_ok=True)
        return tempfile.NamedTemporaryFile(dir=tmpdir, delete=False, prefix="obj-")

    def put_object(self, data: bytes) -> str:
        """Store ``data`` and return its hex SHA-256; identical bytes are stored once."""
        oid = hashlib.sha256(data).hexdigest()
        if self.object_path(oid).exists():
            return oid
        tmp = None
        try:
            with self._tempfile() as fh:
                tmp = Path(fh.name)
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            self._commit(tmp, oid)
        except OSError as exc:
            if tmp is not None:
                tmp.unlink(missing_ok=True)
            raise StorageError(f"could not store object: {exc}") from exc
        return oid

    def put_file(self, path: str | Path) -> str:
        """Stream a file into the store without loading it whole."""
        tmp = None
        try:
            h = hashlib.sha256()
            with open(path, "rb") as src, self._tempfile() as fh:
                tmp = Path(fh.name)
                while chunk := src.read(CHUNK):
                    h.update(chunk)
                    fh.write(chunk)
                fh.flush()
                os.fsync(fh.fileno())
            oid = h.hexdigest()
            self._commit(tmp, oid)
        except OSError as exc:
            if tmp is not None:
                tmp.unlink(missing_ok=True)
            raise StorageError(f"could not store {path}: {exc}") from exc
        return oid

    def get_object(self, oid: str) -> bytes:
        if not is_object_id(oid):
            raise NotFound(f"not an object id: {oid!r}")
        try:
            return self.object_path(oid).read_bytes()
        except FileNotFoundError:
            raise NotFound(f"no object {oid}") from None

    def iter_objects(self) -> Iterator[str]:
        base = self.root / "objects"
        if not base.is_dir():
            return
        for sub in sorted(base.iterdir()):
            if sub.name == "tmp" or not sub.is_dir():
                continue
            for p in sorted(sub.iterdir()):
                yield p.name

    def verify(self) -> list[str]:
        """Return ids of objects whose bytes no longer hash to their name."""
        bad = []
        for oid in self.iter_objects():
            h = hashlib.sha256()
            with open(self.object_path(oid), "rb") as fh:
                while chunk := fh.read(CHUNK):
                    h.update(chunk)
            if h.hexdigest() != oid:
                bad.append(oid)
        return bad

    def materialize(self, oid: str, dest: Path) -> Path:
        """Copy an object to ``dest`` (reused when already present and intact)."""
        if dest.is_file() and dest.stat().st_size == self.object_path(oid).stat().st_size:
            return dest
        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp = dest.with_name(f".{dest.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        try:
            shutil.copyfile(self.object_path(oid), tmp)
            os.replace(tmp, dest)
        except FileNotFoundError:
            tmp.unlink(missing_ok=True)
            raise NotFound(f"no object {oid}") from None
        return dest

    # -- metadata files --------------------------------------------------

    def flow_dir(self, flow_name: str) -> Path:
        return self.root / "flows" / flow_name

    def run_dir(self, flow_name: str, run_id: str) -> Path:
        return self.flow_dir(flow_name) / "runs" / run_id

    def _write_json(self, path: Path, obj) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(dump_json(obj))
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except OSError as exc:
            tmp.unlink(missing_ok=True)
            raise StorageError(f"could not write {path}: {exc}") from exc

    @contextmanager
    def _flow_lock(self, flow_name: str):
        d = self.flow_dir(flow_name)
        d.mkdir(parents=True, exist_ok=True)
        with self._lock, open(d / "lock", "a") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    # -- runs ------------------------------------------------------------

    def bind_params(self, flow: ValidatedFlow, params: Mapping[str, str] | None) -> dict[str, str]:
        params = dict(params or {})
        known = {p.name for p in flow.spec.params}
        for name in params:
            if name not in known:
                raise BindingError(f"unknown param {name!r}")
        bound = {}
        for p in flow.spec.params:
            if p.name in params:
                try:
                    bound[p.name] = check_literal(p.kind, str(params[p.name]))
                except ValueError as exc:
                    raise BindingError(f"param {p.name!r}: {exc}") from None
            elif p.default is not None:
                bound[p.name] = p.default
            else:
                raise BindingError(f"missing required param {p.name!r}")
        return bound

    def resolve_inputs(
        self, flow: ValidatedFlow, inputs: Mapping[str, str] | None, base_dir: str | Path | None
    ) -> dict[str, Path]:
        inputs = dict(inputs or {})
        known = {i.name for i in flow.spec.inputs}
        for name in inputs:
            if name not in known:
                raise BindingError(f"unknown input {name!r}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        paths = {}
        for spec in flow.spec.inputs:
            path = Path(inputs.get(spec.name, spec.path))
            if not path.is_absolute():
                path = base / path
            if not path.is_file():
                raise MissingInput(f"input {spec.name!r}: file not found: {path}")
            paths[spec.name] = path
        return paths

    def create_run(
        self,
        flow: ValidatedFlow,
        params: Mapping[str, str] | None = None,
        inputs: Mapping[str, str] | None = None,
        user: str = "unknown",
        base_dir: str | Path | None = None,
    ) -> RunRecord:
        """Allocate the next run id, snapshot inputs and persist a pending run."""
        bound = self.bind_params(flow, params)
        paths = self.resolve_inputs(flow, inputs, base_dir)
        input_refs = {}
        for name, path in paths.items():
            oid = self.put_file(path)
            input_refs[name] = ArtifactRef(name, "", oid, path.stat().st_size)
        source_oid = self.put_object(flow.spec.source_text.encode("utf-8"))
        with self._flow_lock(flow.name):
            counter = self.flow_dir(flow.name) / "counter"
            last = int(counter.read_text().strip() or 0) if counter.exists() else 0
            run_id = f"{last + 1:06d}"
            run = RunRecord(
                run_id=run_id,
                flow_name=flow.name,
                fingerprint=flow_fingerprint(flow).digest,
                user=user,
                started_at=utc_now(),
                flow_source=source_oid,
                param_bindings=bound,
                input_bindings=input_refs,
                tasks={name: TaskRecord(name) for name in flow.order},
            )
            self.save_run(run)
            tmp = counter.with_name(".counter.tmp")
            tmp.write_text(f"{last + 1}\n")
            os.replace(tmp, counter)
        return run

    def save_run(self, run: RunRecord) -> None:
        d = run.to_dict()
        d["task_order"] = list(run.tasks)
        self._write_json(self.run_dir(run.flow_name, run.run_id) / "meta.json", d)

    def load_run(self, flow_name: str, run_id: str) -> RunRecord:
        path = self.run_dir(flow_name, run_id) / "meta.json"
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise NotFound(f"no run {run_id} of flow {flow_name!r}") from None
        return RunRecord.from_dict(data)

    def update_task(self, run: RunRecord, record: TaskRecord) -> RunRecord:
        """Apply a legal state transition to one task and persist the run."""
        current = run.tasks.get(record.step)
        if current is None:
            raise NotFound(f"run {run.run_id} has no step {record.step!r}")
        if record.status not in _TRANSITIONS[current.status]:
            raise IllegalTransition(f"{record.step}: {current.status} -> {record.status}")
        run.tasks[record.step] = record
        run.recompute_status()
        self.save_run(run)
        return run

    def reset_task(self, run: RunRecord, step: str) -> None:
        """Return a failed/skipped/pending task to pending ahead of a resume."""
        current = run.tasks[step]
        if current.status == "success":
            raise IllegalTransition(f"{step}: success tasks are never reset")
        run.tasks[step] = TaskRecord(step)

    def list_runs(self, flow_name: str) -> list[RunRecord]:
        runs_dir = self.flow_dir(flow_name) / "runs"
        if not runs_dir.is_dir():
            return []
        ids = sorted((p.name for p in runs_dir.iterdir() if (p / "meta.json").is_file()), reverse=True)
        return [self.load_run(flow_name, rid) for rid in ids]

    def list_flows(self) -> list[str]:
        d = self.root / "flows"
        return sorted(p.name for p in d.iterdir()) if d.is_dir() else []

    # -- behavior reports and cards ----------------------------------------

    def save_json(self, flow_name: str, run_id: str, name: str, obj) -> None:
        self._write_json(self.run_dir(flow_name, run_id) / name, obj)

    def load_json(self, flow_name: str, run_id: str, name: str):
        path = self.run_dir(flow_name, run_id) / name
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put_card(self, flow_name: str, scope: str, html: bytes) -> str:
        """Store a rendered card and append it to the flow's card index."""
        if not html:
            raise StorageError("refusing to store an empty card")
        oid = self.put_object(html)
        with self._flow_lock(flow_name):
            index = self.card_index(flow_name)
            index.append({"timestamp": utc_now(), "scope": scope, "object": oid})
            self._write_json(self.flow_dir(flow_name) / "cards.json", index)
        return oid

    def card_index(self, flow_name: str) -> list[dict]:
        path = self.flow_dir(flow_name) / "cards.json"
        if not path.is_file():
            return []
        return json.loads(path.read_text(encoding="utf-8"))
