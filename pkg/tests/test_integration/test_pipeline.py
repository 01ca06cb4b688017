import json
import unittest

import pytest

from qerl.__main__ import EXIT_OK, main
from qerl.config import config_to_dict
from qerl.files import read_csv
from qerl.trainer import (
    ABLATION_FILE,
    CHECKPOINT_FILE,
    DQN_UPDATES_FILE,
    EVENTS_FILE,
    FEEDBACK_FILE,
    KB_SNAPSHOT_FILE,
    LEARNING_CURVE_FILE,
    METRICS_FILE,
    PPO_UPDATES_FILE,
    REPLAY_SUMMARY_FILE,
    TEST_CASES_FILE,
)

from tests.base_test_classes import BaseTestClass
from tests.test_helpers import small_config, temporary_test_directory


@pytest.mark.integration
class TestPipeline(BaseTestClass):
    def test_train_export_replay(self) -> None:
        with temporary_test_directory() as tmp:
            config = tmp / "run.json"
            config.write_text(json.dumps(config_to_dict(small_config("episode_count=4"))), encoding="utf8")
            out = tmp / "out"

            self.assertEqual(main(["train", "--config", str(config), "--out", str(out)]), EXIT_OK)
            for name in (
                METRICS_FILE,
                EVENTS_FILE,
                PPO_UPDATES_FILE,
                DQN_UPDATES_FILE,
                FEEDBACK_FILE,
                TEST_CASES_FILE,
                KB_SNAPSHOT_FILE,
                CHECKPOINT_FILE,
                LEARNING_CURVE_FILE,
                "run.log",
            ):
                self.assertTrue((out / name).exists(), name)
            self.assertEqual(len(read_csv(out / METRICS_FILE)), 4)
            self.assertGreater(len(read_csv(out / DQN_UPDATES_FILE)), 0)

            metrics = (out / METRICS_FILE).read_bytes()
            (out / METRICS_FILE).unlink()
            self.assertEqual(main(["export", "--config", str(config), "--out", str(out)]), EXIT_OK)
            self.assertEqual((out / METRICS_FILE).read_bytes(), metrics)

            replay_out = tmp / "replay"
            code = main(
                [
                    "replay",
                    "--config",
                    str(config),
                    "--feedback",
                    str(out / FEEDBACK_FILE),
                    "--out",
                    str(replay_out),
                ]
            )
            self.assertEqual(code, EXIT_OK)
            summary = json.loads((replay_out / REPLAY_SUMMARY_FILE).read_text(encoding="utf8"))
            self.assertEqual(summary["rejected"], 0)
            self.assertEqual(summary["records"], 4 * 8)

    @pytest.mark.slow
    def test_ablation_through_cli(self) -> None:
        with temporary_test_directory() as tmp:
            config = tmp / "run.json"
            config.write_text(json.dumps(config_to_dict(small_config("episode_count=2"))), encoding="utf8")
            code = main(["ablate", "--config", str(config), "--out", str(tmp / "out"), "--seeds", "2"])
            self.assertEqual(code, EXIT_OK)
            rows = read_csv(tmp / "out" / ABLATION_FILE)
            self.assertEqual([r["variant"] for r in rows][0], "full")
            self.assertEqual(len(rows), 5)


if __name__ == "__main__":
    unittest.main()
