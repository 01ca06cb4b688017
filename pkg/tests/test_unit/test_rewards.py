import math
import unittest

from qerl.domain import DefectReport, Severity
from qerl.errors import EmptyBatch, LengthMismatch, NonPositiveTime, RangeViolation
from qerl.rewards import (
    COMPONENT_NAMES,
    EFFICIENCY_CLAMP,
    RewardConfig,
    RewardWeights,
    SeverityWeights,
    adaptation_reward,
    combine,
    compliance_reward,
    compute_reward,
    coverage_reward,
    effectiveness_reward,
    efficiency_reward,
)

from tests.base_test_classes import BaseTestClass
from tests.test_unit.test_domain import make_feedback


def defect(report_id: str, severity: Severity, false_positive: bool = False) -> DefectReport:
    return DefectReport(report_id, "tc-1", severity, false_positive, None if false_positive else f"d-{report_id}")


class TestWeights(BaseTestClass):
    def test_defaults_sum_to_one(self) -> None:
        self.assertAlmostEqual(math.fsum(RewardWeights().as_tuple()), 1.0, places=12)

    def test_bad_sum_raises(self) -> None:
        with self.assertRaises(RangeViolation):
            RewardWeights(0.5, 0.5, 0.5, 0.0, 0.0)

    def test_negative_weight_raises(self) -> None:
        with self.assertRaises(RangeViolation):
            RewardWeights(1.2, -0.2, 0.0, 0.0, 0.0)

    def test_severity_order_enforced(self) -> None:
        with self.assertRaises(RangeViolation):
            SeverityWeights(critical=1.0, high=2.0)

    def test_severity_lookup(self) -> None:
        weights = SeverityWeights()
        self.assertEqual(weights.weight(Severity.Critical), 4.0)
        self.assertEqual(weights.weight(Severity.Low), 1.0)
        self.assertEqual(weights.max_weight, 4.0)


class TestEffectiveness(BaseTestClass):
    def test_no_defects_is_zero(self) -> None:
        self.assertEqual(effectiveness_reward([make_feedback()], SeverityWeights()), 0.0)

    def test_true_defects_and_false_positives(self) -> None:
        batch = [
            make_feedback(defects=(defect("a", Severity.Critical), defect("b", Severity.Low))),
            make_feedback(defects=(defect("c", Severity.Low, True),)),
        ]
        # (2 / 2) * mean(4, 1) - 0.5 * (1 / 2)
        self.assertAlmostEqual(effectiveness_reward(batch, SeverityWeights()), 2.5 - 0.25)

    def test_empty_batch_raises(self) -> None:
        with self.assertRaises(EmptyBatch):
            effectiveness_reward([], SeverityWeights())


class TestOtherComponents(BaseTestClass):
    def test_coverage_sums_both_assessments(self) -> None:
        self.assertAlmostEqual(coverage_reward([make_feedback()]), 1.0)

    def test_efficiency_ratio_and_clamp(self) -> None:
        self.assertAlmostEqual(efficiency_reward([make_feedback()]), 3.0)
        fast = make_feedback(execution_time=1.0, baseline_time=30.0)
        self.assertEqual(efficiency_reward([fast]), EFFICIENCY_CLAMP)

    def test_efficiency_non_positive_time(self) -> None:
        with self.assertRaises(NonPositiveTime):
            efficiency_reward([make_feedback(execution_time=0.0)])

    def test_compliance_mean(self) -> None:
        batch = [make_feedback(compliance_score=1.0), make_feedback(compliance_score=0.5)]
        self.assertAlmostEqual(compliance_reward(batch), 0.75)

    def test_adaptation_short_history(self) -> None:
        self.assertEqual(adaptation_reward([]), 0.0)
        self.assertEqual(adaptation_reward([1.0]), 0.0)

    def test_adaptation_is_tanh_of_slope(self) -> None:
        self.assertAlmostEqual(adaptation_reward([0.0, 0.5, 1.0, 1.5]), math.tanh(0.5))
        self.assertAlmostEqual(adaptation_reward([3.0, 2.0, 1.0]), math.tanh(-1.0))
        self.assertEqual(adaptation_reward([2.0, 2.0, 2.0]), 0.0)


class TestCombine(BaseTestClass):
    def test_weighted_sum(self) -> None:
        breakdown = combine([1.0, 2.0, 3.0, 4.0, 5.0], RewardWeights())
        self.assertAlmostEqual(breakdown.total, 0.35 + 0.4 + 0.45 + 0.6 + 0.75)
        self.assertEqual(breakdown.components(), (1.0, 2.0, 3.0, 4.0, 5.0))

    def test_length_mismatch(self) -> None:
        with self.assertRaises(LengthMismatch):
            combine([1.0, 2.0], RewardWeights())


class TestComputeReward(BaseTestClass):
    def test_scalar_mode_keeps_components(self) -> None:
        batch = [make_feedback(defects=(defect("a", Severity.High),))]
        full = compute_reward(batch, [], RewardConfig())
        scalar = compute_reward(batch, [], RewardConfig(), scalar=True)
        self.assertEqual(full.components(), scalar.components())
        self.assertAlmostEqual(scalar.total, scalar.effectiveness)

    def test_history_window(self) -> None:
        config = RewardConfig(adaptation_window=3)
        history = [10.0, 0.0, 1.0, 2.0]
        breakdown = compute_reward([make_feedback()], history, config)
        self.assertAlmostEqual(breakdown.adaptation, math.tanh(1.0))

    def test_breakdown_dict_round_trip(self) -> None:
        breakdown = compute_reward([make_feedback()], [0.1, 0.2], RewardConfig())
        data = breakdown.to_dict()
        self.assertEqual(set(data), {*COMPONENT_NAMES, "total"})
        self.assertEqual(type(breakdown).from_dict(data), breakdown)


if __name__ == "__main__":
    unittest.main()
