import json
import unittest
from pathlib import Path
from unittest.mock import MagicMock, patch

from qerl.__main__ import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    GRADCHECK_FILE,
    CliInvocation,
    execute,
    main,
    split_overrides,
)
from qerl.config import config_to_dict
from qerl.errors import ValidationError
from qerl.trainer import CHECKPOINT_FILE, EVALUATION_FILE, METRICS_FILE

from tests.base_test_classes import BaseTestClass
from tests.test_helpers import small_config, temporary_test_directory


def _write_config(directory: Path, *overrides: str) -> str:
    path = directory / "run.json"
    path.write_text(json.dumps(config_to_dict(small_config(*overrides))), encoding="utf8")
    return str(path)


def _gradcheck_result(error: float, passed: bool) -> MagicMock:
    result = MagicMock()
    result.max_relative_error = error
    result.passed = passed
    result.to_dict.return_value = {"max_relative_error": error, "passed": passed}
    return result


class TestSplitOverrides(BaseTestClass):
    def test_both_spellings(self) -> None:
        rest, overrides = split_overrides(["train", "--set", "seed=3", "--config", "c.json", "--set=episode_count=2"])
        self.assertEqual(rest, ["train", "--config", "c.json"])
        self.assertEqual(overrides, ["seed=3", "episode_count=2"])

    def test_dangling_set(self) -> None:
        with self.assertRaises(ValidationError):
            split_overrides(["train", "--set"])

    def test_main_reports_dangling_set(self) -> None:
        self.assertEqual(main(["train", "--set"]), EXIT_VALIDATION)


class TestExecute(BaseTestClass):
    def test_unknown_subcommand(self) -> None:
        self.assertEqual(execute(CliInvocation("publish")), EXIT_VALIDATION)

    def test_missing_config_argument(self) -> None:
        self.assertEqual(execute(CliInvocation("train")), EXIT_VALIDATION)

    def test_missing_config_file(self) -> None:
        with temporary_test_directory() as tmp:
            self.assertEqual(execute(CliInvocation("train", config=str(tmp / "absent.json"))), EXIT_VALIDATION)

    def test_out_of_range_override(self) -> None:
        with temporary_test_directory() as tmp:
            invocation = CliInvocation(
                "train", config=_write_config(tmp), overrides=("ppo.learning_rate=0.01",), out=str(tmp / "out")
            )
            self.assertEqual(execute(invocation), EXIT_VALIDATION)
            self.assertFalse((tmp / "out" / METRICS_FILE).exists())

    def test_export_without_event_log(self) -> None:
        with temporary_test_directory() as tmp:
            invocation = CliInvocation("export", config=_write_config(tmp), out=str(tmp / "out"))
            self.assertEqual(execute(invocation), EXIT_RUNTIME)

    def test_train_then_evaluate(self) -> None:
        with temporary_test_directory() as tmp:
            config = _write_config(tmp, "episode_count=2")
            out = str(tmp / "out")
            self.assertEqual(execute(CliInvocation("train", config=config, out=out)), EXIT_OK)
            self.assertTrue((tmp / "out" / CHECKPOINT_FILE).exists())
            self.assertEqual(execute(CliInvocation("evaluate", config=config, out=out, episodes=1)), EXIT_OK)
            self.assertTrue((tmp / "out" / EVALUATION_FILE).exists())

    @patch("qerl.__main__.run_gradcheck_suite")
    def test_gradcheck_writes_summary(self, mock_suite) -> None:
        mock_suite.return_value = [_gradcheck_result(1e-7, True), _gradcheck_result(3e-6, True)]
        with temporary_test_directory() as tmp:
            self.assertEqual(execute(CliInvocation("gradcheck", out=str(tmp))), EXIT_OK)
            summary = json.loads((tmp / GRADCHECK_FILE).read_text(encoding="utf8"))
            self.assertTrue(summary["passed"])
            self.assertEqual(summary["max_relative_error"], 3e-6)
            self.assertEqual(len(summary["cases"]), 2)

    @patch("qerl.__main__.run_gradcheck_suite")
    def test_failed_gradcheck_is_runtime_error(self, mock_suite) -> None:
        mock_suite.return_value = [_gradcheck_result(0.1, False)]
        self.assertEqual(execute(CliInvocation("gradcheck")), EXIT_RUNTIME)

    @patch("qerl.__main__.run_training")
    def test_unexpected_exception_maps_to_runtime(self, mock_run) -> None:
        mock_run.side_effect = RuntimeError("disk on fire")
        with temporary_test_directory() as tmp:
            invocation = CliInvocation("train", config=_write_config(tmp), out=str(tmp / "out"))
            self.assertEqual(execute(invocation), EXIT_RUNTIME)


class TestMain(BaseTestClass):
    def test_train_through_fire(self) -> None:
        with temporary_test_directory() as tmp:
            config = _write_config(tmp)
            code = main(["train", "--config", config, "--out", str(tmp / "out"), "--set", "episode_count=1"])
            self.assertEqual(code, EXIT_OK)
            self.assertEqual(len((tmp / "out" / METRICS_FILE).read_text(encoding="utf8").splitlines()), 2)

    def test_override_error_through_fire(self) -> None:
        with temporary_test_directory() as tmp:
            config = _write_config(tmp)
            code = main(["train", "--config", config, "--set", "dqn.momentum=0.5"])
            self.assertEqual(code, EXIT_VALIDATION)


if __name__ == "__main__":
    unittest.main()
