import json
import unittest
from pathlib import Path

from qerl.config import (
    AblationFlags,
    RunConfig,
    apply_override,
    build_config,
    config_from_document,
    config_to_dict,
    default_config_document,
    load_config,
    parse_override,
)
from qerl.errors import BadConfig, ParseError, RangeViolation, UnknownKey, ValidationError

from tests.base_test_classes import BaseTestClass
from tests.test_helpers import temporary_test_directory


class TestOverrides(BaseTestClass):
    def test_parse_json_literal_values(self) -> None:
        self.assertEqual(parse_override("seed=7"), ("seed", 7))
        self.assertEqual(parse_override("rl.hidden=[8,8]"), ("rl.hidden", [8, 8]))
        self.assertEqual(parse_override("ablation.no_feedback=true"), ("ablation.no_feedback", True))

    def test_non_json_value_stays_a_string(self) -> None:
        self.assertEqual(parse_override("output_dir=runs/x"), ("output_dir", "runs/x"))

    def test_missing_equals_is_bad_config(self) -> None:
        with self.assertRaises(BadConfig):
            parse_override("seed")

    def test_apply_unknown_key(self) -> None:
        document = default_config_document()
        with self.assertRaises(UnknownKey) as ctx:
            apply_override(document, "ppo.momentum", 0.9)
        self.assertEqual(ctx.exception.key, "ppo.momentum")

    def test_apply_nested_value(self) -> None:
        document = default_config_document()
        apply_override(document, "dqn.batch_size", 16)
        self.assertEqual(document["dqn"]["batch_size"], 16)


class TestBuildConfig(BaseTestClass):
    def test_empty_document_gives_defaults(self) -> None:
        self.assertEqual(build_config(), RunConfig())

    def test_default_config_passes_validation(self) -> None:
        config = config_from_document()
        self.assertEqual(config.ppo.learning_rate, 3e-4)
        self.assertEqual(config.ablation.name, "full")

    def test_seed_override(self) -> None:
        self.assertEqual(config_from_document(overrides=["seed=7"]).seed, 7)

    def test_tuple_fields_are_decoded(self) -> None:
        config = build_config({"rl": {"hidden": [32, 16]}})
        self.assertEqual(config.rl.hidden, (32, 16))

    def test_unknown_document_key(self) -> None:
        with self.assertRaises(UnknownKey):
            build_config({"rl": {"gamma": 0.9}})

    def test_wrong_type_is_bad_config(self) -> None:
        with self.assertRaises(BadConfig) as ctx:
            build_config({"episode_count": "many"})
        self.assertEqual(ctx.exception.key, "episode_count")

    def test_integral_float_accepted_for_int(self) -> None:
        self.assertEqual(build_config({"episode_count": 5.0}).episode_count, 5)

    def test_rl_seed_mirrors_run_seed(self) -> None:
        config = build_config(overrides=["seed=9"])
        self.assertEqual(config.rl.seed, 9)
        self.assertEqual(config.with_seed(4).rl.seed, 4)
        self.assertNotIn("seed", config_to_dict(config)["rl"])

    def test_rl_seed_is_not_a_document_key(self) -> None:
        with self.assertRaises(UnknownKey):
            build_config(overrides=["rl.seed=3"])

    def test_round_trip_through_plain_document(self) -> None:
        config = build_config(overrides=["seed=3", "ablation.scalar_reward=true"])
        self.assertEqual(build_config(config_to_dict(config)), config)


class TestValidation(BaseTestClass):
    def test_ppo_learning_rate_out_of_range(self) -> None:
        with self.assertRaises(RangeViolation) as ctx:
            config_from_document(overrides=["ppo.learning_rate=0.01"])
        self.assertEqual(ctx.exception.key, "ppo.learning_rate")

    def test_ppo_learning_rate_override_flag(self) -> None:
        config = config_from_document(overrides=["ppo.learning_rate=0.01", "ppo.allow_out_of_range=true"])
        self.assertEqual(config.ppo.learning_rate, 0.01)

    def test_discount_factor_outside_unit_interval(self) -> None:
        with self.assertRaises(RangeViolation):
            config_from_document(overrides=["rl.discount_factor=1.5"])

    def test_discount_factor_of_one_rejected(self) -> None:
        with self.assertRaises(RangeViolation) as ctx:
            config_from_document(overrides=["rl.discount_factor=1.0"])
        self.assertEqual(ctx.exception.key, "rl.discount_factor")

    def test_discount_factor_of_zero_accepted(self) -> None:
        self.assertEqual(config_from_document(overrides=["rl.discount_factor=0.0"]).rl.discount_factor, 0.0)

    def test_epsilon_end_above_start(self) -> None:
        with self.assertRaises(RangeViolation) as ctx:
            config_from_document(overrides=["dqn.epsilon_start=0.1", "dqn.epsilon_end=0.5"])
        self.assertEqual(ctx.exception.key, "dqn.epsilon_end")

    def test_epsilon_end_equal_to_start(self) -> None:
        with self.assertRaises(RangeViolation) as ctx:
            config_from_document(overrides=["dqn.epsilon_start=0.3", "dqn.epsilon_end=0.3"])
        self.assertEqual(ctx.exception.key, "dqn.epsilon_end")

    def test_severity_proportions_must_sum_to_one(self) -> None:
        with self.assertRaises(RangeViolation):
            config_from_document(overrides=["env.severity_proportions=[0.5,0.5,0.5,0.5]"])

    def test_empty_hidden_topology_rejected(self) -> None:
        with self.assertRaises(RangeViolation) as ctx:
            config_from_document({"rl": {"hidden": []}})
        self.assertEqual(ctx.exception.key, "rl.hidden")

    def test_zero_episodes_rejected(self) -> None:
        with self.assertRaises(RangeViolation):
            config_from_document(overrides=["episode_count=0"])


class TestLoadConfig(BaseTestClass):
    def test_shipped_default_matches_built_in_defaults(self) -> None:
        shipped = Path(__file__).resolve().parents[2] / "configs" / "default.json"
        self.assertEqual(load_config(shipped), RunConfig())

    def test_missing_file(self) -> None:
        with temporary_test_directory() as tmp:
            with self.assertRaises(ValidationError) as ctx:
                load_config(tmp / "absent.json")
            self.assertEqual(ctx.exception.key, "config")

    def test_partial_document_with_overrides(self) -> None:
        with temporary_test_directory() as tmp:
            path = tmp / "run.json"
            path.write_text(json.dumps({"seed": 4, "dqn": {"batch_size": 32}}), encoding="utf8")
            config = load_config(path, ["episode_count=12"])
            self.assertEqual((config.seed, config.dqn.batch_size, config.episode_count), (4, 32, 12))

    def test_non_object_document(self) -> None:
        with temporary_test_directory() as tmp:
            path = tmp / "run.json"
            path.write_text("[1, 2]", encoding="utf8")
            with self.assertRaises(ParseError):
                load_config(path)


class TestAblationFlags(BaseTestClass):
    def test_names(self) -> None:
        self.assertEqual(AblationFlags().name, "full")
        self.assertEqual(AblationFlags(disable_dqn=True).name, "disable_dqn")
        self.assertEqual(AblationFlags.frozen().name, "disable_ppo+disable_dqn+no_feedback")

    def test_single_ablations_flip_one_flag_each(self) -> None:
        variants = AblationFlags.single_ablations()
        self.assertEqual(len(variants), 4)
        self.assertEqual(
            [v.name for v in variants], ["disable_ppo", "disable_dqn", "scalar_reward", "no_feedback"]
        )


if __name__ == "__main__":
    unittest.main()
