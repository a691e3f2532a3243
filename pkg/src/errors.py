"""
Exception hierarchy for the row-completion engine.
"""

from typing import Optional


class RowCompletionError(Exception):
    """Base class for every error raised by the engine."""


class ConfigError(RowCompletionError, ValueError):
    """Invalid or out-of-range configuration."""


class KbFormatError(RowCompletionError, ValueError):
    """Malformed knowledge-base file."""

    def __init__(self, message: str, line_no: Optional[int] = None, path: Optional[str] = None):
        self.line_no = line_no
        self.path = path
        location = ""
        if path is not None:
            location += f"{path}"
        if line_no is not None:
            location += f":{line_no}" if location else f"line {line_no}"
        super().__init__(f"{location}: {message}" if location else message)


class DuplicateObjectError(KbFormatError):
    """A (subject, property) pair was given two distinct objects."""


class DanglingReferenceError(KbFormatError):
    """A record references an entity or property that was never declared."""


class UnknownIdError(RowCompletionError, KeyError):
    """Lookup of an id that is not registered."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class EmbeddingFormatError(RowCompletionError, ValueError):
    """Malformed embedding file."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class TableFormatError(RowCompletionError, ValueError):
    """Input table could not be read as a rectangular CSV grid."""


class LinkingError(RowCompletionError):
    """A linking precondition does not hold (e.g. an unlinked subject)."""


class ClientError(RowCompletionError):
    """External-service failure."""

    retryable = False


class RetryableClientError(ClientError):
    """Transient failure: timeouts, connection resets, 429 and 5xx responses."""

    retryable = True


class FatalClientError(ClientError):
    """Non-transient failure: authentication, bad requests, missing endpoints."""


class IngestError(RowCompletionError, ValueError):
    """Invalid line in a raw triple export."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class PipelineStageError(RowCompletionError):
    """Failure inside one pipeline stage; `stage` names where it happened."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
