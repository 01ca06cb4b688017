import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import (
    Any,
    Dict,
    Iterable,
    Mapping,
    Optional,
    Tuple,
    Type,
    TypeVar,
    Union,
    get_args,
    get_origin,
    get_type_hints,
)

from danielutils import file_exists

from .domain import FOOTPRINT_SIZE
from .dqn import DQNConfig
from .errors import BadConfig, ParseError, RangeViolation, UnknownKey, ValidationError
from .files import PathLike, read_json
from .knowledge_store import KBConfig
from .ppo import PPOConfig
from .qe_env import EnvConfig
from .rewards import RewardConfig
from .rl_core import RLCoreConfig
from .structures import CodedEnum, Interval, NON_NEGATIVE, POSITIVE, UNIT
from .validators import validate_in_interval

logger = logging.getLogger(__name__)

T = TypeVar("T")

PPO_LEARNING_RATE_RANGE = Interval(1e-4, 3e-4)
AT_LEAST_ONE = Interval(1, math.inf)


@dataclass(frozen=True)
class AgentsConfig:
    n_tests: int = 3
    window: int = 50
    integration_every: int = 4


@dataclass(frozen=True)
class AblationFlags:
    disable_ppo: bool = False
    disable_dqn: bool = False
    scalar_reward: bool = False
    no_feedback: bool = False

    @property
    def name(self) -> str:
        enabled = [f.name for f in fields(self) if getattr(self, f.name)]
        return "+".join(enabled) if enabled else "full"

    @staticmethod
    def frozen() -> "AblationFlags":
        return AblationFlags(True, True, False, True)

    @staticmethod
    def single_ablations() -> Tuple["AblationFlags", ...]:
        return tuple(AblationFlags(**{f.name: True}) for f in fields(AblationFlags))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    episode_count: int = 300
    tests_per_episode: int = 96
    kb_action_interval: int = 4
    n_seeds: int = 5
    n_workers: int = 4
    output_dir: str = "runs/qerl"
    rl: RLCoreConfig = field(default_factory=RLCoreConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    kb: KBConfig = field(default_factory=KBConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        if self.rl.seed != self.seed:
            object.__setattr__(self, "rl", replace(self.rl, seed=self.seed))

    def with_ablation(self, flags: AblationFlags) -> "RunConfig":
        return replace(self, ablation=flags)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


CONFIG_BOUNDS: Dict[str, Interval] = {
    "seed": NON_NEGATIVE,
    "episode_count": AT_LEAST_ONE,
    "tests_per_episode": AT_LEAST_ONE,
    "kb_action_interval": AT_LEAST_ONE,
    "n_seeds": AT_LEAST_ONE,
    "n_workers": Interval(1, 64),
    "rl.discount_factor": Interval.from_string("[0, 1)"),
    "rl.gae_lambda": UNIT,
    "ppo.clip_epsilon": Interval(0.0, 1.0, low_closed=False, high_closed=False),
    "ppo.epochs_per_update": AT_LEAST_ONE,
    "ppo.minibatch_size": AT_LEAST_ONE,
    "ppo.rollout_length": AT_LEAST_ONE,
    "ppo.value_loss_coeff": NON_NEGATIVE,
    "ppo.entropy_coeff": NON_NEGATIVE,
    "dqn.replay_capacity": AT_LEAST_ONE,
    "dqn.batch_size": AT_LEAST_ONE,
    "dqn.target_sync_interval": AT_LEAST_ONE,
    "dqn.epsilon_start": UNIT,
    "dqn.epsilon_end": UNIT,
    "dqn.epsilon_decay_steps": AT_LEAST_ONE,
    "dqn.learning_rate": POSITIVE,
    "dqn.train_steps_per_action": AT_LEAST_ONE,
    "rewards.adaptation_window": Interval(2, math.inf),
    "env.n_requirements": AT_LEAST_ONE,
    "env.n_defects": NON_NEGATIVE,
    "env.d_cov": Interval(FOOTPRINT_SIZE, math.inf),
    "env.tag_pool_size": AT_LEAST_ONE,
    "env.tags_per_requirement": AT_LEAST_ONE,
    "env.legacy_tests_per_requirement": NON_NEGATIVE,
    "env.n_relations": NON_NEGATIVE,
    "kb.d_emb": Interval(8, math.inf),
    "kb.edge_learning_rate": Interval(0.0, 1.0, low_closed=False),
    "kb.initial_usefulness": UNIT,
    "kb.covers_weight": UNIT,
    "kb.max_tests_per_requirement": AT_LEAST_ONE,
    "agents.n_tests": AT_LEAST_ONE,
    "agents.window": AT_LEAST_ONE,
    "agents.integration_every": AT_LEAST_ONE,
}


def config_to_dict(value: Any) -> Any:
    """Plain JSON form of a config tree. Enum keys become their names, tuples become lists.

    Mirrored fields such as rl.seed are left out.
    """
    if is_dataclass(value) and not isinstance(value, type):
        return {
            f.name: config_to_dict(getattr(value, f.name))
            for f in fields(value)
            if not f.metadata.get("mirror")
        }
    if isinstance(value, CodedEnum):
        return str(value)
    if isinstance(value, Mapping):
        return {str(k): config_to_dict(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [config_to_dict(v) for v in value]
    return value


def default_config_document() -> Dict[str, Any]:
    return config_to_dict(RunConfig())


def _type_error(key: str, expected: str, value: Any) -> BadConfig:
    logger.error("'%s' expects %s, got %r", key, expected, value)
    return BadConfig(f"'{key}' expects {expected}, got {value!r}", key=key, module="config")


def _coerce(hint: Any, value: Any, key: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        options = [a for a in get_args(hint) if a is not type(None)]
        return None if value is None else _coerce(options[0], value, key)
    if isinstance(hint, type) and is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise _type_error(key, "an object", value)
        return _build(hint, value, key + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise _type_error(key, "a list", value)
        args = get_args(hint)
        item_hint = args[0] if args else Any
        return tuple(_coerce(item_hint, v, f"{key}[{i}]") for i, v in enumerate(value))
    if origin is dict:
        if not isinstance(value, Mapping):
            raise _type_error(key, "an object", value)
        key_hint, value_hint = get_args(hint)
        result = {}
        for name, item in value.items():
            dotted = f"{key}.{name}"
            if isinstance(key_hint, type) and issubclass(key_hint, CodedEnum):
                try:
                    map_key: Any = key_hint.from_name(name)
                except ValueError as e:
                    raise UnknownKey(f"Unknown key '{dotted}'", key=dotted, module="config") from e
            else:
                map_key = name
            result[map_key] = _coerce(value_hint, item, dotted)
        return result
    if hint is bool:
        if not isinstance(value, bool):
            raise _type_error(key, "a boolean", value)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(key, "an integer", value)
        if isinstance(value, float) and not value.is_integer():
            raise _type_error(key, "an integer", value)
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(key, "a number", value)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise _type_error(key, "a string", value)
        return value
    return value


def _build(cls: Type[T], data: Mapping[str, Any], prefix: str = "") -> T:
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    for name in data:
        if name not in names:
            dotted = prefix + name
            logger.error("Unknown config key '%s'", dotted)
            raise UnknownKey(f"Unknown config key '{dotted}'", key=dotted, module="config")
    kwargs = {name: _coerce(hints[name], data[name], prefix + name) for name in data}
    try:
        return cls(**kwargs)
    except ValidationError as e:
        # re-key nested construction errors with their dotted path
        if e.key is not None and not e.key.startswith(prefix):
            e.key = prefix + e.key.split(".")[-1]
        raise


def _merge(base: Dict[str, Any], patch: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    for name, value in patch.items():
        dotted = prefix + name
        if name not in base:
            logger.error("Unknown config key '%s'", dotted)
            raise UnknownKey(f"Unknown config key '{dotted}'", key=dotted, module="config")
        if isinstance(base[name], dict) and isinstance(value, Mapping):
            _merge(base[name], value, dotted + ".")
        else:
            base[name] = value
    return base


def parse_override(text: str) -> Tuple[str, Any]:
    """'a.b=1' -> ('a.b', 1). Values are JSON literals, falling back to plain strings."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        logger.error("Malformed override '%s'", text)
        raise BadConfig(f"Override '{text}' is not of the form key=value", key=key or text, module="config")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_override(document: Dict[str, Any], key: str, value: Any) -> None:
    node = document
    parts = key.split(".")
    for depth, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            logger.error("Unknown override key '%s'", key)
            raise UnknownKey(f"Unknown config key '{key}'", key=key, module="config")
        if depth == len(parts) - 1:
            if isinstance(node[part], dict) and isinstance(value, Mapping):
                _merge(node[part], value, key + ".")
            else:
                node[part] = value
        else:
            node = node[part]


def _lookup(config: RunConfig, dotted: str) -> Any:
    value: Any = config
    for part in dotted.split("."):
        value = getattr(value, part)
    return value


def validate_run_config(config: RunConfig) -> RunConfig:
    """Checks every declared bound. Errors name the dotted key."""
    for key, interval in CONFIG_BOUNDS.items():
        validate_in_interval(key, _lookup(config, key), interval, module="config")
    if not config.ppo.allow_out_of_range:
        validate_in_interval(
            "ppo.learning_rate", config.ppo.learning_rate, PPO_LEARNING_RATE_RANGE, module="config"
        )
    else:
        validate_in_interval("ppo.learning_rate", config.ppo.learning_rate, POSITIVE, module="config")
    if config.dqn.epsilon_end >= config.dqn.epsilon_start:
        logger.error("dqn.epsilon_end is not below dqn.epsilon_start")
        raise RangeViolation(
            "dqn.epsilon_end must be below dqn.epsilon_start", key="dqn.epsilon_end", module="config"
        )
    if config.env.tags_per_requirement > config.env.tag_pool_size:
        raise RangeViolation(
            "env.tags_per_requirement exceeds env.tag_pool_size",
            key="env.tags_per_requirement",
            module="config",
        )
    proportions = config.env.severity_proportions
    if len(proportions) != 4 or any(p < 0 for p in proportions) or abs(math.fsum(proportions) - 1.0) > 1e-9:
        raise RangeViolation(
            "env.severity_proportions needs four non-negative entries summing to 1",
            key="env.severity_proportions",
            module="config",
        )
    if not config.rl.hidden or any(h < 1 for h in config.rl.hidden):
        raise RangeViolation("rl.hidden needs at least one positive layer size", key="rl.hidden", module="config")
    return config


def build_config(document: Optional[Mapping[str, Any]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Structural decode only: types and unknown keys are checked, bounds are not."""
    merged = _merge(default_config_document(), document or {})
    for text in overrides:
        key, value = parse_override(text)
        logger.debug("Applying override %s=%r", key, value)
        apply_override(merged, key, value)
    return _build(RunConfig, merged)


def config_from_document(
    document: Optional[Mapping[str, Any]] = None, overrides: Iterable[str] = ()
) -> RunConfig:
    return validate_run_config(build_config(document, overrides))


def load_config(path: Optional[PathLike], overrides: Iterable[str] = ()) -> RunConfig:
    """Parses one JSON config document (missing keys default), applies overrides and validates."""
    if path is None or not file_exists(str(path)):
        logger.error("Config file '%s' does not exist", path)
        raise ValidationError(f"Config file '{path}' does not exist", key="config", module="config")
    document = read_json(path, module="config")
    if not isinstance(document, dict):
        raise ParseError(f"Config '{path}' must hold a JSON object", line=1, module="config")
    config = config_from_document(document, list(overrides))
    logger.info("Loaded config from %s (seed=%d, episodes=%d)", path, config.seed, config.episode_count)
    return config


__all__ = [
    "PPO_LEARNING_RATE_RANGE",
    "CONFIG_BOUNDS",
    "AgentsConfig",
    "AblationFlags",
    "RunConfig",
    "config_to_dict",
    "default_config_document",
    "parse_override",
    "apply_override",
    "validate_run_config",
    "build_config",
    "config_from_document",
    "load_config",
]
