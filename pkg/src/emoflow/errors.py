"""Exception hierarchy shared across the package."""

from __future__ import annotations


class EmoflowError(Exception):
    """Base class for all emoflow errors."""


class DimensionMismatch(EmoflowError, ValueError):
    pass


class ZeroVector(EmoflowError, ValueError):
    pass


class EmptyKnowledgeBase(EmoflowError, LookupError):
    """No factor node exists for the requested emotion."""


class SchemaViolation(EmoflowError, ValueError):
    def __init__(self, field_path: str, message: str) -> None:
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class IoFailure(EmoflowError, OSError):
    pass


class InvalidDistribution(EmoflowError, ValueError):
    pass


class IncompatiblePair(EmoflowError, ValueError):
    """An editing method was paired with an element kind it cannot act on."""


class PlanningFailed(EmoflowError):
    pass


class ToolUnavailable(EmoflowError, LookupError):
    pass


class PreconditionError(EmoflowError, ValueError):
    pass


class ImageUnreadable(PreconditionError):
    pass


class BackendError(EmoflowError):
    def __init__(self, route: str, message: str) -> None:
        self.route = route
        super().__init__(f"{route}: {message}")


class BackendUnavailable(BackendError):
    pass


class BackendMalformedResponse(BackendError):
    pass


class BindFailure(EmoflowError, OSError):
    pass


class CorruptRunDirectory(EmoflowError):
    def __init__(self, problems: list[str]) -> None:
        self.problems = problems
        super().__init__("corrupt run directory: " + "; ".join(problems))


class JobInterrupted(EmoflowError):
    """Raised when a run is deliberately stopped at a stage boundary."""
