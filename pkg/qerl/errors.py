import logging
from typing import Callable, Optional, Union

logger = logging.getLogger(__name__)


class QerlError(Exception):
    """Base error of the package. `module` names the component that raised it."""

    module: str = "qerl"
    line: Optional[int] = None

    def __init__(self, message: str, *, module: Optional[str] = None) -> None:
        super().__init__(message)
        if module is not None:
            self.module = module

    def describe(self) -> str:
        return f"[{self.module}] {self}"


class ValidationError(QerlError):
    """Input, config or domain-invariant failure. Maps to exit code 1."""

    def __init__(
        self, message: str, *, key: Optional[str] = None, module: Optional[str] = None
    ) -> None:
        super().__init__(message, module=module)
        self.key = key


class RangeViolation(ValidationError):
    pass


class UnknownKey(ValidationError):
    pass


class BadConfig(ValidationError):
    pass


class UnknownTestCase(ValidationError):
    pass


class UnknownRequirement(ValidationError):
    pass


class UnknownNode(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class NonPositiveTime(ValidationError):
    pass


class InsufficientReplay(ValidationError):
    pass


class StaleRollout(ValidationError):
    pass


class ParseError(QerlError):
    def __init__(
        self, message: str, *, line: Optional[int] = None, module: Optional[str] = None
    ) -> None:
        super().__init__(message, module=module)
        self.line = line


class SchemaVersionMismatch(QerlError):
    pass


class IOFailure(QerlError):
    pass


class EmptyRun(QerlError):
    pass


def raise_if(
    predicate: Union[bool, Callable[[], bool]],
    error: QerlError,
) -> None:
    if callable(predicate):
        predicate = predicate()
    if bool(predicate):
        logger.error("%s: %s", error.__class__.__name__, error.describe())
        raise error


__all__ = [
    "QerlError",
    "ValidationError",
    "RangeViolation",
    "UnknownKey",
    "BadConfig",
    "UnknownTestCase",
    "UnknownRequirement",
    "UnknownNode",
    "DimensionMismatch",
    "LengthMismatch",
    "EmptyInput",
    "EmptyBatch",
    "NonPositiveTime",
    "InsufficientReplay",
    "StaleRollout",
    "ParseError",
    "SchemaVersionMismatch",
    "IOFailure",
    "EmptyRun",
    "raise_if",
]
