import inspect
import json
import unittest
from typing import Any, Dict, List

import qerl.trainer as trainer_module
from qerl.config import AblationFlags
from qerl.errors import EmptyRun, SchemaVersionMismatch
from qerl.files import dump_json, read_csv, write_json_atomic
from qerl.trainer import (
    ABLATION_FILE,
    CHECKPOINT_FILE,
    EVENTS_FILE,
    FEEDBACK_FILE,
    KB_SNAPSHOT_FILE,
    METRICS_FILE,
    TEST_CASES_FILE,
    LearningSystem,
    checkpoint,
    evaluate,
    export_metrics,
    final_window,
    learning_curve,
    metrics_from_events,
    read_events,
    replay,
    restore,
    run_ablation_suite,
    run_episode,
    run_training,
    train,
)

from tests.base_test_classes import BaseTestClass
from tests.test_helpers import small_config, temporary_test_directory


def _events_of(path, kind: str) -> List[Dict[str, Any]]:
    return [e for e in read_events(path) if e["type"] == kind]


def _hand_events() -> List[Dict[str, Any]]:
    reward = {
        "effectiveness": 0.5,
        "coverage": 0.25,
        "efficiency": 0.1,
        "compliance": 1.0,
        "adaptation": 0.0,
        "total": 0.4,
    }
    feedback = {
        "requirement_refs": ["REQ-1"],
        "quality_rating": 0.75,
        "detected": ["DEF-1"],
        "false_positives": 0,
        "reachable": {"REQ-1": 2},
    }
    return [
        {"type": "episode_start", "episode": 0, "n_requirements": 4},
        {"type": "feedback", "episode": 0, **feedback},
        {"type": "feedback", "episode": 0, **feedback, "quality_rating": 0.25, "false_positives": 1},
        {"type": "reward", "episode": 0, **reward},
        {"type": "episode_end", "episode": 0},
        {"type": "episode_start", "episode": 1, "n_requirements": 4},
        {"type": "feedback", "episode": 1, **feedback},
        {"type": "episode_aborted", "episode": 1, "slot": 0, "error": "boom"},
    ]


class TestEpisodeMetrics(BaseTestClass):
    def test_metrics_from_hand_written_events(self) -> None:
        metrics = metrics_from_events(_hand_events())
        self.assertEqual(len(metrics), 1)
        m = metrics[0]
        self.assertEqual(m.episode, 0)
        self.assertAlmostEqual(m.generation_accuracy, 0.5)
        self.assertAlmostEqual(m.defect_detection_rate, 0.5)
        self.assertAlmostEqual(m.false_positive_rate, 0.5)
        self.assertAlmostEqual(m.requirement_coverage, 0.25)
        self.assertAlmostEqual(m.reward.total, 0.4)

    def test_learning_curve_weeks(self) -> None:
        metrics = metrics_from_events(_hand_events()) * 5
        weeks = learning_curve(metrics, week_size=2)
        self.assertEqual([w["episodes"] for w in weeks], [2, 2, 1])
        self.assertAlmostEqual(weeks[0]["mean_reward"], 0.4)

    def test_final_window_of_nothing(self) -> None:
        with self.assertRaises(EmptyRun):
            final_window([])


class TestRunEpisode(BaseTestClass):
    def test_episode_executes_exactly_the_requested_tests(self) -> None:
        config = small_config("tests_per_episode=4", "agents.n_tests=3", "episode_count=1")
        with temporary_test_directory() as tmp:
            run_training(config, tmp)
            self.assertEqual(len(_events_of(tmp / EVENTS_FILE, "feedback")), 4)
            self.assertEqual(len(_events_of(tmp / EVENTS_FILE, "reward")), 2)
            for name in (FEEDBACK_FILE, TEST_CASES_FILE):
                lines = (tmp / name).read_text(encoding="utf8").splitlines()
                self.assertEqual(len(lines), 4)

    def test_episode_counter_and_metrics_bounds(self) -> None:
        system = train(LearningSystem(small_config()), 2)
        self.assertEqual(system.episode, 2)
        self.assertEqual([m.episode for m in system.metrics], [0, 1])
        for m in system.metrics:
            for value in (m.generation_accuracy, m.defect_detection_rate, m.false_positive_rate, m.requirement_coverage):
                self.assertGreaterEqual(value, 0.0)
                self.assertLessEqual(value, 1.0)

    def test_feedback_events_carry_only_defect_counts(self) -> None:
        config = small_config("episode_count=1")
        with temporary_test_directory() as tmp:
            system = run_training(config, tmp)
            seeded = {r.id: len(r.hidden_defect_ids) for r in system.project.requirements}
            for event in _events_of(tmp / EVENTS_FILE, "feedback"):
                self.assertEqual(set(event["reachable"]), set(event["requirement_refs"]))
                for ref, count in event["reachable"].items():
                    self.assertEqual(count, seeded[ref])
        self.assertNotIn("hidden_defect_ids", inspect.getsource(trainer_module))

    def test_hidden_topology_sizes_every_network(self) -> None:
        system = LearningSystem(small_config("rl.hidden=[12,6]"))
        self.assertEqual(system.dqn.qnet.sizes[1:-1], (12, 6))
        for agent in system.agents.values():
            self.assertEqual(agent.learner.params.sizes[1:-1], (12, 6))

    def test_greedy_episode_learns_nothing(self) -> None:
        system = LearningSystem(small_config())
        before = dump_json({"agents": {str(r): a.to_dict() for r, a in system.agents.items()}, "kb": system.kb.to_dict()})
        run_episode(system, learn=False)
        after = dump_json({"agents": {str(r): a.to_dict() for r, a in system.agents.items()}, "kb": system.kb.to_dict()})
        self.assertEqual(before, after)
        self.assertEqual(system.dqn.steps, 0)

    def test_frozen_system_keeps_policies_and_knowledge(self) -> None:
        config = small_config("ppo.rollout_length=4").with_ablation(AblationFlags.frozen())
        system = LearningSystem(config)
        kb_before = dump_json(system.kb.to_dict())
        params_before = {r: a.learner.params.to_dict() for r, a in system.agents.items()}
        train(system, 2)
        self.assertEqual(dump_json(system.kb.to_dict()), kb_before)
        for role, agent in system.agents.items():
            self.assertEqual(agent.learner.params.to_dict(), params_before[role])
        self.assertEqual(system.ppo_rows, [])
        self.assertEqual(system.dqn_rows, [])


class TestDeterminism(BaseTestClass):
    def test_same_seed_gives_byte_identical_artifacts(self) -> None:
        config = small_config()
        with temporary_test_directory() as tmp:
            run_training(config, tmp / "a")
            run_training(config, tmp / "b")
            for name in (CHECKPOINT_FILE, METRICS_FILE, EVENTS_FILE, KB_SNAPSHOT_FILE):
                self.assertEqual((tmp / "a" / name).read_bytes(), (tmp / "b" / name).read_bytes(), name)

    def test_checkpoint_then_resume_matches_straight_run(self) -> None:
        config = small_config()
        straight = train(LearningSystem(config), 3)
        with temporary_test_directory() as tmp:
            first = train(LearningSystem(config), 2)
            checkpoint(first, tmp / CHECKPOINT_FILE)
            resumed = train(restore(tmp / CHECKPOINT_FILE), 1)
        self.assertEqual(dump_json(resumed.to_dict()), dump_json(straight.to_dict()))

    def test_resume_rewinds_logs_to_checkpoint(self) -> None:
        config = small_config()
        with temporary_test_directory() as tmp:
            straight = LearningSystem(config, tmp / "straight")
            straight.reset_logs()
            train(straight, 2)

            partial = LearningSystem(config, tmp / "resumed")
            partial.reset_logs()
            train(partial, 1)
            checkpoint(partial, tmp / CHECKPOINT_FILE)
            train(partial, 1)
            resumed = restore(tmp / CHECKPOINT_FILE, tmp / "resumed")
            train(resumed, 1)
            for name in (EVENTS_FILE, FEEDBACK_FILE, TEST_CASES_FILE):
                self.assertEqual(
                    (tmp / "straight" / name).read_bytes(), (tmp / "resumed" / name).read_bytes(), name
                )

    def test_checkpoint_round_trip_is_stable(self) -> None:
        with temporary_test_directory() as tmp:
            system = train(LearningSystem(small_config()), 1)
            checkpoint(system, tmp / "one.json")
            checkpoint(restore(tmp / "one.json"), tmp / "two.json")
            self.assertEqual((tmp / "one.json").read_bytes(), (tmp / "two.json").read_bytes())

    def test_unknown_checkpoint_schema(self) -> None:
        with temporary_test_directory() as tmp:
            data = LearningSystem(small_config()).to_dict()
            data["schema_version"] = 99
            write_json_atomic(tmp / CHECKPOINT_FILE, data)
            with self.assertRaises(SchemaVersionMismatch):
                restore(tmp / CHECKPOINT_FILE)


class TestArtifacts(BaseTestClass):
    def test_export_rederives_metrics(self) -> None:
        with temporary_test_directory() as tmp:
            run_training(small_config(), tmp)
            export_metrics(tmp / EVENTS_FILE, tmp / "exported.csv")
            self.assertEqual((tmp / "exported.csv").read_bytes(), (tmp / METRICS_FILE).read_bytes())
            self.assertEqual(len(read_csv(tmp / METRICS_FILE)), 3)

    def test_export_of_empty_log(self) -> None:
        with temporary_test_directory() as tmp:
            (tmp / EVENTS_FILE).write_text("", encoding="utf8")
            with self.assertRaises(EmptyRun):
                export_metrics(tmp / EVENTS_FILE, tmp / METRICS_FILE)

    def test_run_log_is_written(self) -> None:
        with temporary_test_directory() as tmp:
            run_training(small_config("episode_count=1"), tmp)
            self.assertIn("Training finished", (tmp / "run.log").read_text(encoding="utf8"))

    def test_evaluate_leaves_checkpoint_untouched(self) -> None:
        with temporary_test_directory() as tmp:
            run_training(small_config(), tmp)
            before = (tmp / CHECKPOINT_FILE).read_bytes()
            metrics = evaluate(tmp / CHECKPOINT_FILE, 2, tmp / "eval")
            self.assertEqual(len(metrics), 2)
            self.assertEqual([m.episode for m in metrics], [3, 4])
            self.assertEqual((tmp / CHECKPOINT_FILE).read_bytes(), before)
            self.assertTrue((tmp / "eval" / "evaluation.csv").exists())

    def test_replay_of_recorded_feedback(self) -> None:
        config = small_config()
        with temporary_test_directory() as tmp:
            run_training(config, tmp / "run")
            n_lines = len((tmp / "run" / FEEDBACK_FILE).read_text(encoding="utf8").splitlines())
            _, summary = replay(config, tmp / "run" / FEEDBACK_FILE, tmp / "run" / TEST_CASES_FILE, tmp / "replay")
            self.assertEqual(summary.records, n_lines)
            self.assertEqual(summary.rejected, 0)
            saved = json.loads((tmp / "replay" / "replay_summary.json").read_text(encoding="utf8"))
            self.assertEqual(saved["records"], n_lines)
            self.assertTrue((tmp / "replay" / KB_SNAPSHOT_FILE).exists())


class TestAblationSuite(BaseTestClass):
    def test_small_suite_has_one_row_per_variant(self) -> None:
        config = small_config("episode_count=2")
        with temporary_test_directory() as tmp:
            table = run_ablation_suite(config, 2, tmp)
            self.assertEqual(
                [row.variant for row in table],
                ["full", "disable_ppo", "disable_dqn", "scalar_reward", "no_feedback"],
            )
            self.assertTrue(all(row.n_seeds == 2 for row in table))
            self.assertEqual(len(read_csv(tmp / ABLATION_FILE)), 5)
            self.assertEqual(len(read_csv(tmp / "ablation_runs.csv")), 10)

    def test_suite_is_deterministic(self) -> None:
        config = small_config("episode_count=1")
        first = run_ablation_suite(config, 1)
        second = run_ablation_suite(config, 1)
        self.assertEqual([r.to_row() for r in first], [r.to_row() for r in second])


if __name__ == "__main__":
    unittest.main()
