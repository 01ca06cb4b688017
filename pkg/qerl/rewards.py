import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from .domain import FeedbackRecord, Severity
from .errors import EmptyBatch, LengthMismatch, NonPositiveTime, RangeViolation, raise_if

logger = logging.getLogger(__name__)

EFFICIENCY_CLAMP: float = 4.0
COMPONENT_NAMES: Tuple[str, ...] = (
    "effectiveness",
    "coverage",
    "efficiency",
    "compliance",
    "adaptation",
)


def _bad_config(message: str, key: str) -> RangeViolation:
    return RangeViolation(message, key=key, module="rewards")


@dataclass(frozen=True)
class RewardWeights:
    alpha_effectiveness: float = 0.35
    alpha_coverage: float = 0.20
    alpha_efficiency: float = 0.15
    alpha_compliance: float = 0.15
    alpha_adaptation: float = 0.15

    def __post_init__(self) -> None:
        for name, value in zip(COMPONENT_NAMES, self.as_tuple()):
            raise_if(value < 0, _bad_config(f"alpha_{name} must be non-negative", f"alpha_{name}"))
        raise_if(
            abs(math.fsum(self.as_tuple()) - 1.0) > 1e-9,
            _bad_config(
                f"Reward weights must sum to 1.0, got {math.fsum(self.as_tuple())!r}",
                "weights",
            ),
        )

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (
            self.alpha_effectiveness,
            self.alpha_coverage,
            self.alpha_efficiency,
            self.alpha_compliance,
            self.alpha_adaptation,
        )

    @staticmethod
    def effectiveness_only() -> "RewardWeights":
        return RewardWeights(1.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SeverityWeights:
    critical: float = 4.0
    high: float = 3.0
    medium: float = 2.0
    low: float = 1.0
    false_positive_penalty: float = 0.5

    def __post_init__(self) -> None:
        raise_if(
            not (self.critical > self.high > self.medium > self.low > 0),
            _bad_config(
                "Severity weights must satisfy critical > high > medium > low > 0",
                "severity_weights",
            ),
        )
        raise_if(
            self.false_positive_penalty < 0,
            _bad_config("false_positive_penalty must be non-negative", "false_positive_penalty"),
        )

    def weight(self, severity: Severity) -> float:
        return float(getattr(self, severity.name.lower()))

    @property
    def max_weight(self) -> float:
        return self.critical


@dataclass(frozen=True)
class RewardBreakdown:
    effectiveness: float
    coverage: float
    efficiency: float
    compliance: float
    adaptation: float
    total: float

    def components(self) -> Tuple[float, float, float, float, float]:
        return (self.effectiveness, self.coverage, self.efficiency, self.compliance, self.adaptation)

    def to_dict(self) -> Dict[str, float]:
        return {
            "effectiveness": self.effectiveness,
            "coverage": self.coverage,
            "efficiency": self.efficiency,
            "compliance": self.compliance,
            "adaptation": self.adaptation,
            "total": self.total,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "RewardBreakdown":
        return RewardBreakdown(**{k: float(data[k]) for k in (*COMPONENT_NAMES, "total")})


@dataclass(frozen=True)
class RewardConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    severity_weights: SeverityWeights = field(default_factory=SeverityWeights)
    adaptation_window: int = 20


def _require_batch(batch: Sequence[FeedbackRecord], name: str) -> None:
    raise_if(
        len(batch) == 0,
        EmptyBatch(f"{name} needs a non-empty batch", key="batch", module="rewards"),
    )


def effectiveness_reward(batch: Sequence[FeedbackRecord], sw: SeverityWeights) -> float:
    """(true defects / tests) * mean severity weight of true defects - penalty * (FPs / tests)."""
    _require_batch(batch, "effectiveness_reward")
    total_tests = len(batch)
    true_weights = [sw.weight(d.severity) for r in batch for d in r.true_defects]
    false_positives = sum(len(r.false_positives) for r in batch)
    detection = 0.0
    if true_weights:
        detection = (len(true_weights) / total_tests) * (math.fsum(true_weights) / len(true_weights))
    return detection - sw.false_positive_penalty * (false_positives / total_tests)


def coverage_reward(batch: Sequence[FeedbackRecord]) -> float:
    _require_batch(batch, "coverage_reward")
    return math.fsum(
        r.requirement_coverage_assessment + r.functional_coverage_validation for r in batch
    ) / len(batch)


def efficiency_reward(batch: Sequence[FeedbackRecord]) -> float:
    _require_batch(batch, "efficiency_reward")
    ratios = []
    for record in batch:
        if record.execution_time <= 0 or record.baseline_time <= 0:
            logger.error(
                "Non-positive time in feedback for '%s': execution=%s baseline=%s",
                record.test_case_ref,
                record.execution_time,
                record.baseline_time,
            )
            raise NonPositiveTime(
                f"Feedback for '{record.test_case_ref}' has a non-positive time",
                key="execution_time" if record.execution_time <= 0 else "baseline_time",
                module="rewards",
            )
        ratio = (record.baseline_time / record.execution_time) * record.workflow_integration_factor
        ratios.append(min(max(ratio, 0.0), EFFICIENCY_CLAMP))
    return math.fsum(ratios) / len(ratios)


def compliance_reward(batch: Sequence[FeedbackRecord]) -> float:
    _require_batch(batch, "compliance_reward")
    return math.fsum(r.compliance_score for r in batch) / len(batch)


def adaptation_reward(history: Sequence[float]) -> float:
    """tanh of the least-squares slope of the reward history against its index."""
    if len(history) < 2:
        return 0.0
    y = np.asarray(history, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    x_centered = x - x.mean()
    slope = float(np.dot(x_centered, y - y.mean()) / np.dot(x_centered, x_centered))
    return math.tanh(slope)


def combine(components: Sequence[float], weights: RewardWeights) -> RewardBreakdown:
    raise_if(
        len(components) != len(COMPONENT_NAMES),
        LengthMismatch(
            f"combine expects {len(COMPONENT_NAMES)} components, got {len(components)}",
            key="components",
            module="rewards",
        ),
    )
    values = tuple(float(c) for c in components)
    total = math.fsum(a * c for a, c in zip(weights.as_tuple(), values))
    return RewardBreakdown(*values, total=total)


def compute_reward(
    batch: Sequence[FeedbackRecord],
    history: Sequence[float],
    config: RewardConfig,
    scalar: bool = False,
) -> RewardBreakdown:
    """All five components for one batch. In scalar mode only effectiveness is weighted."""
    window = list(history)[-config.adaptation_window :] if config.adaptation_window > 0 else []
    components = (
        effectiveness_reward(batch, config.severity_weights),
        coverage_reward(batch),
        efficiency_reward(batch),
        compliance_reward(batch),
        adaptation_reward(window),
    )
    weights = RewardWeights.effectiveness_only() if scalar else config.weights
    breakdown = combine(components, weights)
    logger.debug(
        "Reward over %d records: total=%.4f components=%s",
        len(batch),
        breakdown.total,
        ["%.4f" % c for c in components],
    )
    return breakdown


__all__ = [
    "EFFICIENCY_CLAMP",
    "COMPONENT_NAMES",
    "RewardWeights",
    "SeverityWeights",
    "RewardBreakdown",
    "RewardConfig",
    "effectiveness_reward",
    "coverage_reward",
    "efficiency_reward",
    "compliance_reward",
    "adaptation_reward",
    "combine",
    "compute_reward",
]
