import logging
import math
from typing import Optional, Sequence, Type

from .domain import FeedbackRecord, ProjectCatalog, TestCase
from .errors import (
    DimensionMismatch,
    RangeViolation,
    UnknownRequirement,
    UnknownTestCase,
    ValidationError,
)
from .structures import Interval, POSITIVE, UNIT

logger = logging.getLogger(__name__)

WORKFLOW_FACTOR_RANGE = Interval(0.0, 2.0, low_closed=False)

_FEEDBACK_BOUNDS = (
    ("execution_time", POSITIVE),
    ("baseline_time", POSITIVE),
    ("quality_rating", UNIT),
    ("requirement_coverage_assessment", UNIT),
    ("functional_coverage_validation", UNIT),
    ("workflow_integration_factor", WORKFLOW_FACTOR_RANGE),
    ("compliance_score", UNIT),
)


def validate_in_interval(
    key: str,
    value: float,
    interval: Interval,
    *,
    module: str = "validators",
    error_type: Type[ValidationError] = RangeViolation,
) -> float:
    logger.debug("Validating '%s'=%s against %s", key, value, interval)
    if not interval.contains(value):
        logger.error("'%s'=%s is outside %s", key, value, interval)
        raise error_type(f"{key}={value!r} is outside {interval}", key=key, module=module)
    return value


def validate_feedback(record: FeedbackRecord, catalog: ProjectCatalog) -> FeedbackRecord:
    """Check referential and range invariants of a feedback record. Returns the same record."""
    logger.debug("Validating feedback for test case '%s'", record.test_case_ref)
    if not catalog.has_test_case(record.test_case_ref):
        logger.error("Feedback references unknown test case '%s'", record.test_case_ref)
        raise UnknownTestCase(
            f"Unknown test case '{record.test_case_ref}'",
            key="test_case_ref",
            module="domain",
        )
    for defect in record.defects:
        if defect.test_case_ref != record.test_case_ref:
            logger.error(
                "Defect '%s' references '%s' inside feedback for '%s'",
                defect.id,
                defect.test_case_ref,
                record.test_case_ref,
            )
            raise UnknownTestCase(
                f"Defect '{defect.id}' references test case '{defect.test_case_ref}' "
                f"but belongs to feedback for '{record.test_case_ref}'",
                key="defects.test_case_ref",
                module="domain",
            )
    for key, interval in _FEEDBACK_BOUNDS:
        validate_in_interval(key, getattr(record, key), interval, module="domain")
    return record


def validate_test_case(
    test_case: TestCase, catalog: ProjectCatalog, d_cov: int
) -> TestCase:
    logger.debug("Validating test case '%s'", test_case.id)
    for ref in test_case.requirement_refs:
        if not catalog.has_requirement(ref):
            logger.error("Test case '%s' references unknown requirement '%s'", test_case.id, ref)
            raise UnknownRequirement(
                f"Unknown requirement '{ref}'", key="requirement_refs", module="domain"
            )
    validate_dimension("coverage_vector", len(test_case.coverage_vector), d_cov, module="domain")
    return test_case


def validate_dimension(key: str, actual: int, expected: int, *, module: str) -> None:
    if actual != expected:
        logger.error("'%s' has dimension %d, expected %d", key, actual, expected)
        raise DimensionMismatch(
            f"{key} has dimension {actual}, expected {expected}", key=key, module=module
        )


def validate_finite(key: str, values: Sequence[float], *, module: str) -> None:
    if not all(math.isfinite(v) for v in values):
        logger.error("'%s' contains non-finite entries", key)
        raise RangeViolation(f"{key} contains non-finite entries", key=key, module=module)


def validate_required_path(key: str, path: Optional[str]) -> str:
    """CLI arguments are optional for fire; commands that need a path check it here."""
    if not path:
        raise ValidationError(f"Missing required path '{key}'", key=key, module="cli")
    return path


__all__ = [
    "WORKFLOW_FACTOR_RANGE",
    "validate_in_interval",
    "validate_feedback",
    "validate_test_case",
    "validate_dimension",
    "validate_finite",
    "validate_required_path",
]
