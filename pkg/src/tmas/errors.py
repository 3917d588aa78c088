"""Exception types shared across the package."""

from __future__ import annotations


class TmasError(Exception):
    """Base class for every error raised by this package."""


class RangeError(TmasError, ValueError):
    """A config or input field is out of range or unknown."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TemplateError(TmasError):
    """A prompt template could not be rendered."""


class ParseError(TmasError):
    """A structured input file is malformed."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc += str(path)
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class TransportError(TmasError):
    """A completion call failed terminally (network, HTTP, or retry exhaustion)."""


class SchemaError(TmasError):
    """The endpoint replied with a payload that does not match the wire schema."""


class ScriptMatchError(TmasError):
    """A scripted backend had no (or more than one) entry for a request.

    Deliberately not a TransportError: an unmatched request means the script
    fixture is wrong, and the run must abort loudly instead of degrading.
    """


class EmptyHistory(TmasError):
    """Final-answer selection was asked to pick from zero rollouts."""


class CorruptStore(TmasError):
    """A run directory is in a state the writer could never have produced."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class EmptyGroup(TmasError):
    """A reward computation needs a non-empty group."""


class PartitionError(TmasError):
    """Base/Bank groups do not evenly partition a reward batch."""


class EmptyBenchmark(TmasError):
    """A benchmark or judgment set contains no problems."""
