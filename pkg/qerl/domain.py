import hashlib
import json
import logging
import re
from dataclasses import dataclass
from functools import lru_cache, total_ordering
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ParseError, ValidationError, raise_if
from .structures import CodedEnum

logger = logging.getLogger(__name__)

D_COV_DEFAULT: int = 32
FOOTPRINT_SIZE: int = 8

_TOKEN_RE = re.compile(r"[a-zA-Z0-9]+")


class GenerationStrategy(CodedEnum):
    HappyPath = 0
    Boundary = 1
    Negative = 2
    Integration = 3
    RegressionDerived = 4


class RetrievalMode(CodedEnum):
    VectorOnly = 0
    GraphOnly = 1
    Hybrid = 2


@total_ordering
class Severity(CodedEnum):
    """Defect severity. Ordered so that Critical > High > Medium > Low."""

    Critical = 0
    High = 1
    Medium = 2
    Low = 3

    @property
    def rank(self) -> int:
        return len(Severity.__members__) - self.code

    def __lt__(self, other: Any) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank < other.rank

    def __hash__(self) -> int:
        return hash(self.name)


class AgentRole(CodedEnum):
    LegacyTestAnalysis = 0
    FunctionalChangeMapping = 1
    IntegrationPoint = 2
    TestCaseGeneration = 3
    ComplianceValidation = 4


def tokenize(text: str) -> List[str]:
    return [t.lower() for t in _TOKEN_RE.findall(text)]


def stable_digest(text: str) -> int:
    """Platform independent 64-bit hash of a string."""
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf8"), digest_size=8).digest(), "little"
    )


def content_id(prefix: str, payload: Mapping[str, Any]) -> str:
    encoded = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return f"{prefix}-{hashlib.sha1(encoded.encode('utf8')).hexdigest()[:12]}"


def _invalid(message: str, key: str) -> ValidationError:
    return ValidationError(message, key=key, module="domain")


@dataclass(frozen=True)
class Requirement:
    id: str
    text: str
    component_tags: FrozenSet[str] = frozenset()
    # simulation ground truth, read only by qe_env
    hidden_defect_ids: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        raise_if(not self.id, _invalid("Requirement id must be non-empty", "id"))
        object.__setattr__(self, "component_tags", frozenset(self.component_tags))
        object.__setattr__(self, "hidden_defect_ids", tuple(self.hidden_defect_ids))

    def tokens(self) -> List[str]:
        return tokenize(self.text) + sorted(self.component_tags)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "component_tags": sorted(self.component_tags),
            "hidden_defect_ids": list(self.hidden_defect_ids),
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "Requirement":
        return Requirement(
            id=data["id"],
            text=data["text"],
            component_tags=frozenset(data.get("component_tags", [])),
            hidden_defect_ids=tuple(data.get("hidden_defect_ids", [])),
        )


@dataclass(frozen=True)
class TestCase:
    __test__ = False

    id: str
    requirement_refs: Tuple[str, ...]
    strategy: GenerationStrategy
    retrieval_mode: RetrievalMode
    coverage_vector: Tuple[float, ...]
    generating_agent: AgentRole
    context_refs: Tuple[str, ...] = ()
    compliance_checks: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "requirement_refs", tuple(self.requirement_refs))
        object.__setattr__(
            self, "coverage_vector", tuple(float(v) for v in self.coverage_vector)
        )
        object.__setattr__(self, "context_refs", tuple(self.context_refs))
        raise_if(not self.id, _invalid("TestCase id must be non-empty", "id"))
        raise_if(
            len(self.requirement_refs) == 0,
            _invalid(
                f"TestCase '{self.id}' must reference at least one requirement",
                "requirement_refs",
            ),
        )
        raise_if(
            lambda: any(not (0.0 <= v <= 1.0) for v in self.coverage_vector),
            _invalid(
                f"TestCase '{self.id}' coverage_vector components must lie in [0, 1]",
                "coverage_vector",
            ),
        )
        raise_if(
            self.compliance_checks < 0,
            _invalid("compliance_checks must be non-negative", "compliance_checks"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "requirement_refs": list(self.requirement_refs),
            "strategy": str(self.strategy),
            "retrieval_mode": str(self.retrieval_mode),
            "coverage_vector": list(self.coverage_vector),
            "generating_agent": str(self.generating_agent),
            "context_refs": list(self.context_refs),
            "compliance_checks": self.compliance_checks,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "TestCase":
        return TestCase(
            id=data["id"],
            requirement_refs=tuple(data["requirement_refs"]),
            strategy=GenerationStrategy.from_name(data["strategy"]),
            retrieval_mode=RetrievalMode.from_name(data["retrieval_mode"]),
            coverage_vector=tuple(data["coverage_vector"]),
            generating_agent=AgentRole.from_name(data["generating_agent"]),
            context_refs=tuple(data.get("context_refs", [])),
            compliance_checks=int(data.get("compliance_checks", 0)),
        )


@dataclass(frozen=True)
class DefectReport:
    id: str
    test_case_ref: str
    severity: Severity
    is_false_positive: bool
    defect_ref: Optional[str] = None

    def __post_init__(self) -> None:
        raise_if(not self.id, _invalid("DefectReport id must be non-empty", "id"))
        raise_if(
            self.is_false_positive and self.defect_ref is not None,
            _invalid(
                f"False-positive report '{self.id}' cannot reference a catalog defect",
                "defect_ref",
            ),
        )
        raise_if(
            not self.is_false_positive and not self.defect_ref,
            _invalid(
                f"True defect report '{self.id}' must reference exactly one catalog defect",
                "defect_ref",
            ),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "test_case_ref": self.test_case_ref,
            "severity": str(self.severity),
            "is_false_positive": self.is_false_positive,
            "defect_ref": self.defect_ref,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "DefectReport":
        return DefectReport(
            id=data["id"],
            test_case_ref=data["test_case_ref"],
            severity=Severity.from_name(data["severity"]),
            is_false_positive=bool(data["is_false_positive"]),
            defect_ref=data.get("defect_ref"),
        )


@dataclass(frozen=True)
class FeedbackRecord:
    """One QE verdict on one executed test case. Ranges are checked by validate_feedback."""

    test_case_ref: str
    defects: Tuple[DefectReport, ...]
    execution_time: float
    baseline_time: float
    quality_rating: float
    requirement_coverage_assessment: float
    functional_coverage_validation: float
    workflow_integration_factor: float
    compliance_score: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "defects", tuple(self.defects))

    @property
    def true_defects(self) -> Tuple[DefectReport, ...]:
        return tuple(d for d in self.defects if not d.is_false_positive)

    @property
    def false_positives(self) -> Tuple[DefectReport, ...]:
        return tuple(d for d in self.defects if d.is_false_positive)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "test_case_ref": self.test_case_ref,
            "defects": [d.to_dict() for d in self.defects],
            "execution_time": self.execution_time,
            "baseline_time": self.baseline_time,
            "quality_rating": self.quality_rating,
            "requirement_coverage_assessment": self.requirement_coverage_assessment,
            "functional_coverage_validation": self.functional_coverage_validation,
            "workflow_integration_factor": self.workflow_integration_factor,
            "compliance_score": self.compliance_score,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "FeedbackRecord":
        return FeedbackRecord(
            test_case_ref=data["test_case_ref"],
            defects=tuple(DefectReport.from_dict(d) for d in data["defects"]),
            execution_time=float(data["execution_time"]),
            baseline_time=float(data["baseline_time"]),
            quality_rating=float(data["quality_rating"]),
            requirement_coverage_assessment=float(
                data["requirement_coverage_assessment"]
            ),
            functional_coverage_validation=float(data["functional_coverage_validation"]),
            workflow_integration_factor=float(data["workflow_integration_factor"]),
            compliance_score=float(data["compliance_score"]),
        )


def feedback_to_line(record: FeedbackRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True)


def feedback_from_line(line: str, line_number: Optional[int] = None) -> FeedbackRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(
            f"line {line_number}: invalid JSON ({e.msg})", line=line_number, module="domain"
        ) from e
    if not isinstance(data, dict):
        raise ParseError(
            f"line {line_number}: expected a JSON object", line=line_number, module="domain"
        )
    try:
        return FeedbackRecord.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(
            f"line {line_number}: malformed feedback record ({e!r})",
            line=line_number,
            module="domain",
        ) from e


class ProjectCatalog:
    """Requirements and test cases by id; the referential scope of feedback validation."""

    def __init__(
        self,
        requirements: Iterable[Requirement] = (),
        test_cases: Iterable[TestCase] = (),
    ) -> None:
        self.requirements: Dict[str, Requirement] = {}
        self.test_cases: Dict[str, TestCase] = {}
        for requirement in requirements:
            raise_if(
                requirement.id in self.requirements,
                _invalid(f"Duplicate requirement id '{requirement.id}'", "id"),
            )
            self.requirements[requirement.id] = requirement
        for test_case in test_cases:
            self.add_test_case(test_case)

    def add_test_case(self, test_case: TestCase) -> None:
        self.test_cases[test_case.id] = test_case

    def has_test_case(self, test_case_id: str) -> bool:
        return test_case_id in self.test_cases

    def has_requirement(self, requirement_id: str) -> bool:
        return requirement_id in self.requirements

    def clear_test_cases(self) -> None:
        self.test_cases.clear()


@lru_cache(maxsize=4096)
def _ranked_dimensions(key: str, d_cov: int) -> Tuple[int, ...]:
    return tuple(sorted(range(d_cov), key=lambda d: stable_digest(f"{key}:{d}")))


def coverage_footprint(
    requirement: Requirement, d_cov: int = D_COV_DEFAULT, size: int = FOOTPRINT_SIZE
) -> Tuple[int, ...]:
    """Ordered coverage dimensions a requirement exercises, derived from its public tags.

    Requirements sharing a tag share part of their footprint.
    """
    size = min(size, d_cov)
    keys = sorted(requirement.component_tags) or [requirement.id]
    ranked = [_ranked_dimensions(k, d_cov) for k in keys]
    footprint: List[int] = []
    depth = 0
    while len(footprint) < size:
        for dims in ranked:
            dim = dims[depth]
            if dim not in footprint:
                footprint.append(dim)
                if len(footprint) == size:
                    break
        depth += 1
    return tuple(footprint)


# coverage emphasis per footprint position (Low, Low, Medium, Medium, High, High, Critical, Critical)
STRATEGY_PROFILES: Dict[GenerationStrategy, Tuple[float, ...]] = {
    GenerationStrategy.HappyPath: (0.9, 0.9, 0.5, 0.5, 0.2, 0.2, 0.1, 0.1),
    GenerationStrategy.Boundary: (0.6, 0.6, 0.9, 0.9, 0.6, 0.6, 0.3, 0.3),
    GenerationStrategy.Negative: (0.3, 0.3, 0.6, 0.6, 0.9, 0.9, 0.6, 0.6),
    GenerationStrategy.Integration: (0.5, 0.5, 0.5, 0.5, 0.8, 0.8, 0.9, 0.9),
    GenerationStrategy.RegressionDerived: (0.7, 0.4, 0.7, 0.4, 0.7, 0.4, 0.7, 0.4),
}


def place_on_footprint(footprint: Sequence[int], profile: Sequence[float], d_cov: int) -> np.ndarray:
    vector = np.zeros(d_cov, dtype=np.float64)
    for position, dim in enumerate(footprint):
        vector[dim] = profile[position]
    return vector


def requirement_tokens(requirement: Requirement, *extra: str) -> List[str]:
    return requirement.tokens() + [e.lower() for e in extra]


__all__ = [
    "D_COV_DEFAULT",
    "FOOTPRINT_SIZE",
    "GenerationStrategy",
    "RetrievalMode",
    "Severity",
    "AgentRole",
    "Requirement",
    "TestCase",
    "DefectReport",
    "FeedbackRecord",
    "ProjectCatalog",
    "tokenize",
    "stable_digest",
    "content_id",
    "coverage_footprint",
    "STRATEGY_PROFILES",
    "place_on_footprint",
    "requirement_tokens",
    "feedback_to_line",
    "feedback_from_line",
]
