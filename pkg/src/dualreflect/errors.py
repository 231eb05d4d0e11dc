"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class DualReflectError(Exception):
    """Base class for every error raised by this package."""


class InvalidTask(DualReflectError, ValueError):
    pass


class IllegalState(DualReflectError, RuntimeError):
    pass


class PromptRenderError(DualReflectError, ValueError):
    pass


class UnparseableJudgment(DualReflectError, ValueError):
    def __init__(self, raw: str) -> None:
        super().__init__(f"judgment output has no leading True/False token: {raw[:80]!r}")
        self.raw = raw


class ExtractionFailure(DualReflectError, ValueError):
    def __init__(self, raw: str) -> None:
        super().__init__(f"no final_translation object found in: {raw[:80]!r}")
        self.raw = raw


# Backend errors. The pipeline converts any of these into BackendFailure.


class BackendError(DualReflectError):
    pass


class TransportError(BackendError):
    """Connection failure, timeout or 5xx that survived every retry."""

    def __init__(self, message: str, attempts: int = 1, status: int | None = None) -> None:
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class RateLimited(TransportError):
    pass


class BadRequest(BackendError):
    def __init__(self, message: str, status: int) -> None:
        super().__init__(message)
        self.status = status


class MalformedResponse(BackendError):
    pass


class ScriptError(BackendError, ValueError):
    """Script file does not match the rule schema."""


class ScriptExhausted(BackendError):
    pass


class BackendFailure(DualReflectError):
    """A pipeline run lost its backend; the partial transcript is kept."""

    def __init__(self, cause: BaseException, transcript: tuple[Any, ...] = ()) -> None:
        super().__init__(f"backend failure: {cause}")
        self.cause = cause
        self.transcript = tuple(transcript)


class SequenceError(DualReflectError, ValueError):
    pass


class RunNotFound(DualReflectError, LookupError):
    pass


class MetricMismatch(DualReflectError, ValueError):
    pass


class DegenerateSample(DualReflectError, ValueError):
    pass


class ExportError(DualReflectError, ValueError):
    pass


class AnalysisError(DualReflectError, ValueError):
    pass
