"""Exception hierarchy shared by every dagdoc module."""

from __future__ import annotations


class DagdocError(Exception):
    """Base class for all dagdoc errors."""


class FlowError(DagdocError):
    """A problem in a flow definition, optionally located at line/column."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(self.location() + message)

    def location(self) -> str:
        if self.line is None:
            return ""
        if self.column is None:
            return f"{self.line}: "
        return f"{self.line}:{self.column}: "


class FlowSyntaxError(FlowError):
    pass


class DuplicateName(FlowError):
    pass


class UnknownReference(FlowError):
    pass


class BadLiteral(FlowError):
    pass


class CycleError(FlowError):
    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(cycle))


class NoRoot(FlowError):
    pass


class StorageError(DagdocError):
    pass


class NotFound(DagdocError):
    pass


class BindingError(DagdocError):
    pass


class MissingInput(DagdocError):
    pass


class IllegalTransition(DagdocError):
    pass


class UnknownPlaceholder(DagdocError):
    def __init__(self, name: str, position: int):
        self.name = name
        self.position = position
        super().__init__(f"unknown placeholder {{{name}}} at position {position}")


class UpstreamNotRun(DagdocError):
    pass


class CommandSpawnError(DagdocError):
    pass


class MissingDeclaredOutput(DagdocError):
    pass


class NotResumable(DagdocError):
    pass


class BadSetting(DagdocError):
    pass


class DegenerateData(DagdocError):
    pass


class MalformedLine(DagdocError):
    def __init__(self, lineno: int, reason: str):
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"line {lineno}: {reason}")


class NotRunnable(DagdocError):
    pass


class UnknownFlow(DagdocError):
    pass


class ProviderError(DagdocError):
    pass


class MalformedFragment(ProviderError):
    pass
