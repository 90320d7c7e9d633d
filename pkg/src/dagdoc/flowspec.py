"""Flow definition language: parsing, DAG validation, waves and fingerprints.

A flow file is line oriented::

    flow SubstituteFlow
    doc "Trains a substitute model"
    param lr float default 0.05
    input raw file "data/raw.csv"

    step start
      exec "echo hello"
    step train after start
      resources gpu
      builtin train_toy epochs=500 lr={param.lr}
      out model "model.txt"

    behavior "predicts a sneaker"
      input "white sneaker"
      via "{sys.python} -m mypkg.predict {artifact.train.model}"
      expect contains "sneaker"

``#`` starts a comment (outside strings), blank lines are ignored and
strings are double quoted with ``\\"`` and ``\\\\`` escapes.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

from dagdoc.errors import (
    BadLiteral,
    CycleError,
    DuplicateName,
    FlowSyntaxError,
    NoRoot,
    UnknownReference,
)

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
INT_RE = re.compile(r"[+-]?\d+\Z")
PARAM_KINDS = ("int", "float", "text", "flag")
EXPECT_KINDS = ("equals", "contains", "regex", "approx")
_LINE_SPLIT = re.compile(r"\r\n|\r|\n")


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    default: str | None = None


@dataclass(frozen=True)
class InputSpec:
    name: str
    path: str


@dataclass(frozen=True)
class ExecTask:
    command: str


@dataclass(frozen=True)
class BuiltinTask:
    name: str
    settings: tuple[tuple[str, str], ...] = ()

    def settings_dict(self) -> dict[str, str]:
        return dict(self.settings)


@dataclass(frozen=True)
class StepSpec:
    name: str
    task: ExecTask | BuiltinTask
    doc: str = ""
    after: tuple[str, ...] = ()
    resources: tuple[str, ...] = ()
    outputs: tuple[tuple[str, str], ...] = ()
    line: int = 0


@dataclass(frozen=True)
class Expect:
    """What a behavioral case expects from the predict entrypoint.

    ``value`` is the text for equals/contains/regex and the target number
    for approx; ``tol`` is only set for approx.
    """

    kind: str
    value: str | float
    tol: float | None = None

    def describe(self) -> str:
        if self.kind == "approx":
            return f"approx {self.value:g} tol {self.tol:g}"
        return f"{self.kind} {self.value!r}"


@dataclass(frozen=True)
class BehaviorCase:
    name: str
    via: str
    expect: Expect
    input: str = ""
    line: int = 0


@dataclass(frozen=True)
class FlowSpec:
    name: str
    doc: str
    params: tuple[ParamSpec, ...]
    inputs: tuple[InputSpec, ...]
    steps: tuple[StepSpec, ...]
    behaviors: tuple[BehaviorCase, ...]
    source_text: str

    def step(self, name: str) -> StepSpec:
        for s in self.steps:
            if s.name == name:
                return s
        raise KeyError(name)

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def input(self, name: str) -> InputSpec:
        for i in self.inputs:
            if i.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class ValidatedFlow:
    """A FlowSpec known to be acyclic, with its deterministic topological order."""

    spec: FlowSpec
    order: tuple[str, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def steps(self) -> tuple[StepSpec, ...]:
        return self.spec.steps

    def step(self, name: str) -> StepSpec:
        return self.spec.step(name)

    def predecessors(self, name: str) -> tuple[str, ...]:
        return self.spec.step(name).after

    def successors(self, name: str) -> list[str]:
        return sorted(s.name for s in self.spec.steps if name in s.after)

    def descendants(self, name: str) -> set[str]:
        seen: set[str] = set()
        todo = [name]
        while todo:
            for nxt in self.successors(todo.pop()):
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return seen


@dataclass(frozen=True)
class FlowFingerprint:
    digest: str

    def __str__(self) -> str:
        return self.digest


# --------------------------------------------------------------------------
# Lexing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # "word", "string", ",", "="
    text: str
    col: int


def _scan_string(line: str, start: int, lineno: int) -> tuple[str, int]:
    """Scan a quoted string starting at ``line[start] == '"'``.

    Returns the unescaped text and the index just past the closing quote.
    """
    out = []
    i = start + 1
    while i < len(line):
        ch = line[i]
        if ch == "\\":
            if i + 1 < len(line) and line[i + 1] in '"\\':
                out.append(line[i + 1])
                i += 2
                continue
            raise FlowSyntaxError('bad escape, expected \\" or \\\\', lineno, i + 1)
        if ch == '"':
            return "".join(out), i + 1
        out.append(ch)
        i += 1
    raise FlowSyntaxError("unterminated string", lineno, start + 1)


def _tokenize(line: str, lineno: int) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch.isspace():
            i += 1
        elif ch == "#":
            break
        elif ch == '"':
            text, end = _scan_string(line, i, lineno)
            tokens.append(Token("string", text, i + 1))
            i = end
        elif ch in ",=":
            tokens.append(Token(ch, ch, i + 1))
            i += 1
        else:
            j = i
            while j < n and not line[j].isspace() and line[j] not in '",=#':
                j += 1
            tokens.append(Token("word", line[i:j], i + 1))
            i = j
    return tokens


def strip_comment(line: str) -> str:
    """Return ``line`` without its ``#`` comment, leaving ``#`` inside strings alone."""
    in_string = False
    i = 0
    while i < len(line):
        ch = line[i]
        if in_string:
            if ch == "\\":
                i += 2
                continue
            if ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "#":
            return line[:i]
        i += 1
    return line


# --------------------------------------------------------------------------
# Literals
# --------------------------------------------------------------------------


def check_literal(kind: str, text: str) -> str:
    """Validate ``text`` as a literal of ``kind`` and return its canonical text.

    Raises ValueError when it does not parse.
    """
    if kind == "int":
        if not INT_RE.match(text):
            raise ValueError(f"{text!r} is not an int")
        return text
    if kind == "float":
        try:
            value = float(text)
        except ValueError:
            raise ValueError(f"{text!r} is not a float") from None
        if not math.isfinite(value):
            raise ValueError(f"{text!r} is not a finite float")
        return text
    if kind == "flag":
        if text not in ("true", "false"):
            raise ValueError(f"{text!r} is not a flag (true/false)")
        return text
    if kind == "text":
        return text
    raise ValueError(f"unknown kind {kind!r}")


def _number(tok: Token | None, lineno: int, what: str) -> float:
    if tok is None or tok.kind != "word":
        raise FlowSyntaxError(f"expected NUMBER for {what}", lineno, tok.col if tok else None)
    try:
        value = float(tok.text)
    except ValueError:
        raise BadLiteral(f"{tok.text!r} is not a number", lineno, tok.col) from None
    if not math.isfinite(value):
        raise BadLiteral(f"{tok.text!r} is not finite", lineno, tok.col)
    return value


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


class _Line:
    """Cursor over one line's tokens with ``expect`` helpers."""

    def __init__(self, tokens: list[Token], lineno: int, length: int):
        self.tokens = tokens
        self.lineno = lineno
        self.pos = 0
        self.eol_col = length + 1

    def peek(self) -> Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self) -> Token | None:
        tok = self.peek()
        if tok is not None:
            self.pos += 1
        return tok

    def fail(self, expected: str) -> FlowSyntaxError:
        tok = self.peek()
        if tok is None:
            return FlowSyntaxError(f"expected {expected}, found end of line", self.lineno, self.eol_col)
        return FlowSyntaxError(f"expected {expected}, found {tok.text!r}", self.lineno, tok.col)

    def ident(self) -> Token:
        tok = self.peek()
        if tok is None or tok.kind != "word" or not IDENT_RE.match(tok.text):
            raise self.fail("IDENT")
        self.pos += 1
        return tok

    def string(self) -> Token:
        tok = self.peek()
        if tok is None or tok.kind != "string":
            raise self.fail("STRING")
        self.pos += 1
        return tok

    def keyword(self, *words: str) -> Token:
        tok = self.peek()
        if tok is None or tok.kind != "word" or tok.text not in words:
            raise self.fail(" or ".join(repr(w) for w in words))
        self.pos += 1
        return tok

    def end(self) -> None:
        if self.peek() is not None:
            raise self.fail("end of line")


class _StepBuilder:
    def __init__(self, name: str, after: list[tuple[str, int, int]], line: int):
        self.name = name
        self.after = after
        self.line = line
        self.doc: list[str] = []
        self.resources: list[str] = []
        self.task: ExecTask | BuiltinTask | None = None
        self.outputs: list[tuple[str, str]] = []

    def build(self) -> StepSpec:
        if self.task is None:
            raise FlowSyntaxError(
                f"step {self.name!r} has no task, expected 'exec' or 'builtin'", self.line, 1
            )
        after = tuple(dict.fromkeys(a for a, _, _ in self.after))
        return StepSpec(
            name=self.name,
            task=self.task,
            doc="\n".join(self.doc),
            after=after,
            resources=tuple(dict.fromkeys(self.resources)),
            outputs=tuple(self.outputs),
            line=self.line,
        )


class _BehaviorBuilder:
    def __init__(self, name: str, line: int):
        self.name = name
        self.line = line
        self.input: str | None = None
        self.via: str | None = None
        self.expect: Expect | None = None

    def build(self) -> BehaviorCase:
        if self.via is None:
            raise FlowSyntaxError(f"behavior {self.name!r} lacks a 'via' line", self.line, 1)
        if self.expect is None:
            raise FlowSyntaxError(f"behavior {self.name!r} lacks an 'expect' line", self.line, 1)
        return BehaviorCase(
            name=self.name, via=self.via, expect=self.expect, input=self.input or "", line=self.line
        )


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.name: str | None = None
        self.doc: list[str] = []
        self.params: list[ParamSpec] = []
        self.inputs: list[InputSpec] = []
        self.steps: list[StepSpec] = []
        self.behaviors: list[BehaviorCase] = []
        self.globals: set[str] = set()
        self.step_names: dict[str, int] = {}
        self.refs: list[tuple[str, int, int]] = []
        self.step: _StepBuilder | None = None
        self.behavior: _BehaviorBuilder | None = None

    def parse(self) -> FlowSpec:
        for lineno, raw in enumerate(_LINE_SPLIT.split(self.source), start=1):
            tokens = _tokenize(raw, lineno)
            if not tokens:
                continue
            self._line(_Line(tokens, lineno, len(raw)))
        self._close_block()
        if self.name is None:
            raise FlowSyntaxError("expected 'flow' declaration, found end of file", 1, 1)
        for ref, lineno, col in self.refs:
            if ref not in self.step_names:
                raise UnknownReference(f"'after' names unknown step {ref!r}", lineno, col)
        return FlowSpec(
            name=self.name,
            doc="\n".join(self.doc),
            params=tuple(self.params),
            inputs=tuple(self.inputs),
            steps=tuple(self.steps),
            behaviors=tuple(self.behaviors),
            source_text=self.source,
        )

    def _close_block(self) -> None:
        if self.step is not None:
            self.steps.append(self.step.build())
            self.step = None
        if self.behavior is not None:
            self.behaviors.append(self.behavior.build())
            self.behavior = None

    def _line(self, ln: _Line) -> None:
        head = ln.peek()
        if self.name is None:
            ln.keyword("flow")
            self.name = ln.ident().text
            ln.end()
            return
        if head.kind == "word" and head.text == "step":
            self._close_block()
            self._step_header(ln)
        elif head.kind == "word" and head.text == "behavior":
            self._close_block()
            ln.next()
            self.behavior = _BehaviorBuilder(ln.string().text, ln.lineno)
            ln.end()
        elif self.behavior is not None:
            self._behavior_line(ln)
        elif self.step is not None:
            self._step_line(ln)
        else:
            self._header_line(ln)

    # -- header -----------------------------------------------------------

    def _declare_global(self, tok: Token, lineno: int) -> None:
        if tok.text in self.globals:
            raise DuplicateName(f"duplicate param/input name {tok.text!r}", lineno, tok.col)
        self.globals.add(tok.text)

    def _header_line(self, ln: _Line) -> None:
        kw = ln.keyword("doc", "param", "input", "step", "behavior", "flow")
        if kw.text == "flow":
            raise FlowSyntaxError("duplicate 'flow' declaration", ln.lineno, kw.col)
        if kw.text == "doc":
            self.doc.append(ln.string().text)
        elif kw.text == "param":
            name = ln.ident()
            self._declare_global(name, ln.lineno)
            kind = ln.keyword(*PARAM_KINDS).text
            default = None
            if ln.peek() is not None:
                ln.keyword("default")
                tok = ln.next()
                if tok is None or tok.kind not in ("word", "string"):
                    raise FlowSyntaxError("expected LITERAL after 'default'", ln.lineno, ln.eol_col)
                if tok.kind == "string" and kind != "text":
                    raise BadLiteral(f"string default for {kind} param {name.text!r}", ln.lineno, tok.col)
                try:
                    default = check_literal(kind, tok.text)
                except ValueError as exc:
                    raise BadLiteral(str(exc), ln.lineno, tok.col) from None
            self.params.append(ParamSpec(name.text, kind, default))
        elif kw.text == "input":
            name = ln.ident()
            self._declare_global(name, ln.lineno)
            ln.keyword("file")
            path = ln.string()
            if not path.text:
                raise BadLiteral(f"input {name.text!r} has an empty path", ln.lineno, path.col)
            self.inputs.append(InputSpec(name.text, path.text))
        ln.end()

    # -- steps -----------------------------------------------------------

    def _step_header(self, ln: _Line) -> None:
        ln.keyword("step")
        name = ln.ident()
        if name.text in self.step_names:
            raise DuplicateName(
                f"duplicate step name {name.text!r} (first defined on line {self.step_names[name.text]})",
                ln.lineno,
                name.col,
            )
        self.step_names[name.text] = ln.lineno
        after: list[tuple[str, int, int]] = []
        if ln.peek() is not None:
            ln.keyword("after")
            while True:
                tok = ln.ident()
                after.append((tok.text, ln.lineno, tok.col))
                if ln.peek() is None:
                    break
                if ln.next().kind != ",":
                    ln.pos -= 1
                    raise ln.fail("',' or end of line")
        self.refs.extend(after)
        self.step = _StepBuilder(name.text, after, ln.lineno)

    def _step_line(self, ln: _Line) -> None:
        st = self.step
        kw = ln.keyword("doc", "resources", "exec", "builtin", "out", "step", "behavior")
        if kw.text == "doc":
            st.doc.append(ln.string().text)
        elif kw.text == "resources":
            st.resources.append(ln.ident().text)
            while ln.peek() is not None:
                if ln.next().kind != ",":
                    ln.pos -= 1
                    raise ln.fail("','")
                st.resources.append(ln.ident().text)
        elif kw.text in ("exec", "builtin"):
            if st.task is not None:
                raise FlowSyntaxError(f"step {st.name!r} already has a task", ln.lineno, kw.col)
            if kw.text == "exec":
                st.task = ExecTask(ln.string().text)
            else:
                st.task = self._builtin(ln)
        elif kw.text == "out":
            name = ln.ident()
            if any(n == name.text for n, _ in st.outputs):
                raise DuplicateName(f"duplicate output {name.text!r} in step {st.name!r}", ln.lineno, name.col)
            path = ln.string()
            if not path.text:
                raise BadLiteral("empty output path", ln.lineno, path.col)
            st.outputs.append((name.text, path.text))
        ln.end()

    def _builtin(self, ln: _Line) -> BuiltinTask:
        name = ln.ident().text
        settings: list[tuple[str, str]] = []
        while ln.peek() is not None:
            key = ln.ident()
            if any(k == key.text for k, _ in settings):
                raise DuplicateName(f"duplicate setting {key.text!r}", ln.lineno, key.col)
            eq = ln.next()
            if eq is None or eq.kind != "=":
                if eq is not None:
                    ln.pos -= 1
                raise ln.fail("'='")
            value = ln.next()
            if value is None or value.kind not in ("word", "string"):
                if value is not None:
                    ln.pos -= 1
                raise ln.fail("VALUE")
            settings.append((key.text, value.text))
        return BuiltinTask(name, tuple(settings))

    # -- behaviors -------------------------------------------------------

    def _behavior_line(self, ln: _Line) -> None:
        b = self.behavior
        kw = ln.keyword("input", "via", "expect", "step", "behavior")
        if kw.text == "input":
            b.input = ln.string().text
        elif kw.text == "via":
            b.via = ln.string().text
        elif kw.text == "expect":
            b.expect = self._expect(ln)
        ln.end()

    def _expect(self, ln: _Line) -> Expect:
        kind = ln.keyword(*EXPECT_KINDS)
        if kind.text == "approx":
            target = _number(ln.next(), ln.lineno, "approx target")
            ln.keyword("tol")
            tol_tok = ln.peek()
            tol = _number(ln.next(), ln.lineno, "tolerance")
            if tol <= 0:
                raise BadLiteral("tolerance must be > 0", ln.lineno, tol_tok.col)
            return Expect("approx", target, tol)
        text = ln.string()
        if kind.text == "regex":
            try:
                re.compile(text.text)
            except re.error as exc:
                raise BadLiteral(f"regex does not compile: {exc}", ln.lineno, text.col) from None
        return Expect(kind.text, text.text)


def parse_flow(source: str) -> FlowSpec:
    """Parse flow-file text into a FlowSpec (acyclicity is checked by validate_dag)."""
    return _Parser(source).parse()


def load_flow(path: str | Path) -> FlowSpec:
    """Read and parse a flow file, keeping its bytes (line endings included) intact."""
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_flow(fh.read())


# --------------------------------------------------------------------------
# DAG
# --------------------------------------------------------------------------


def find_cycle(nodes: list[str], preds: dict[str, tuple[str, ...]]) -> list[str] | None:
    """Return one cycle as ``[n0, n1, ..., n0]`` following dependency edges, or None."""
    succ: dict[str, list[str]] = {n: [] for n in nodes}
    for n in nodes:
        for p in preds[n]:
            succ[p].append(n)
    for n in succ:
        succ[n].sort()
    WHITE, GREY, BLACK = 0, 1, 2
    colour = dict.fromkeys(nodes, WHITE)
    for root in sorted(nodes):
        if colour[root] != WHITE:
            continue
        stack = [(root, iter(succ[root]))]
        path = [root]
        colour[root] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = BLACK
                stack.pop()
                path.pop()
            elif colour[nxt] == GREY:
                cyc = path[path.index(nxt):]
                i = cyc.index(min(cyc))
                cyc = cyc[i:] + cyc[:i]
                return cyc + [cyc[0]]
            elif colour[nxt] == WHITE:
                colour[nxt] = GREY
                path.append(nxt)
                stack.append((nxt, iter(succ[nxt])))
    return None


def validate_dag(flow: FlowSpec) -> ValidatedFlow:
    """Check acyclicity and roots; order steps topologically, ties by name."""
    names = [s.name for s in flow.steps]
    preds = {s.name: s.after for s in flow.steps}
    cycle = find_cycle(names, preds)
    if cycle is not None:
        raise CycleError(cycle)
    roots = sorted(n for n in names if not preds[n])
    if not roots:
        raise NoRoot("flow has no root step (a step without 'after')")
    indegree = {n: len(preds[n]) for n in names}
    succ: dict[str, list[str]] = {n: [] for n in names}
    for n in names:
        for p in preds[n]:
            succ[p].append(n)
    heap = list(roots)
    heapq.heapify(heap)
    order = []
    while heap:
        n = heapq.heappop(heap)
        order.append(n)
        for m in succ[n]:
            indegree[m] -= 1
            if indegree[m] == 0:
                heapq.heappush(heap, m)
    warnings = ()
    if len(roots) > 1:
        warnings = (f"flow has {len(roots)} root steps ({', '.join(roots)}); a single 'start' is conventional",)
    return ValidatedFlow(flow, tuple(order), warnings)


def step_depths(flow: ValidatedFlow) -> dict[str, int]:
    """Length of the longest predecessor chain for every step."""
    depth: dict[str, int] = {}
    for name in flow.order:
        preds = flow.predecessors(name)
        depth[name] = 1 + max(depth[p] for p in preds) if preds else 0
    return depth


def execution_waves(flow: ValidatedFlow) -> list[list[str]]:
    """Group steps by longest-path depth; each wave is sorted by name."""
    depth = step_depths(flow)
    waves: list[list[str]] = [[] for _ in range(max(depth.values()) + 1)] if depth else []
    for name, d in depth.items():
        waves[d].append(name)
    return [sorted(w) for w in waves]


# --------------------------------------------------------------------------
# Fingerprint
# --------------------------------------------------------------------------


def normalize_source(source: str) -> str:
    """Drop comments, trailing whitespace and blank lines; use LF endings."""
    lines = []
    for raw in _LINE_SPLIT.split(source):
        line = strip_comment(raw).rstrip()
        if line:
            lines.append(line)
    return "\n".join(lines) + "\n"


def flow_fingerprint(flow: FlowSpec | ValidatedFlow) -> FlowFingerprint:
    spec = flow.spec if isinstance(flow, ValidatedFlow) else flow
    digest = hashlib.sha256(normalize_source(spec.source_text).encode("utf-8")).hexdigest()
    return FlowFingerprint(digest)
