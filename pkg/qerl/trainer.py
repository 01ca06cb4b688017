import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from .agents import (
    MODIFIER_ROLES,
    Agent,
    AgentAction,
    Emission,
    PerformanceTracker,
    Shaping,
    featurize_state,
    generate_test_cases,
    record_feedback,
)
from .config import AblationFlags, RunConfig, build_config, config_to_dict
from .domain import (
    AgentRole,
    FeedbackRecord,
    ProjectCatalog,
    Requirement,
    TestCase,
    coverage_footprint,
    requirement_tokens,
)
from .dqn import DIAGNOSTIC_COLUMNS, DQNController, kb_state_vector
from .errors import EmptyRun, ParseError, QerlError, SchemaVersionMismatch, raise_if
from .files import JsonlAppender, PathLike, iter_lines, read_json, write_csv, write_json_atomic
from .knowledge_store import KnowledgeStore
from .logging_ import run_log
from .ppo import REPORT_COLUMNS
from .qe_env import (
    SyntheticProject,
    execute_test,
    generate_project,
    reachable_defect_counts,
    replay_feedback,
    seed_knowledge_store,
)
from .rewards import COMPONENT_NAMES, RewardBreakdown, compute_reward
from .rl_core import RngStreams, Transition
from .validators import validate_feedback
from .worker_pool import SupportsProgress, run_keyed_jobs

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION: int = 1
FINAL_WINDOW: int = 30
WEEK_SIZE: int = 25
HISTORY_LIMIT: int = 200

METRICS_FILE = "metrics.csv"
EVENTS_FILE = "events.jsonl"
PPO_UPDATES_FILE = "ppo_updates.csv"
DQN_UPDATES_FILE = "dqn_updates.csv"
FEEDBACK_FILE = "feedback.jsonl"
TEST_CASES_FILE = "test_cases.jsonl"
KB_SNAPSHOT_FILE = "kb_snapshot.json"
CHECKPOINT_FILE = "checkpoint.json"
LEARNING_CURVE_FILE = "learning_curve.csv"
EVALUATION_FILE = "evaluation.csv"
ABLATION_FILE = "ablation.csv"
ABLATION_RUNS_FILE = "ablation_runs.csv"
REPLAY_SUMMARY_FILE = "replay_summary.json"

REWARD_COLUMNS: Tuple[str, ...] = tuple(f"r_{name}" for name in (*COMPONENT_NAMES, "total"))
METRICS_COLUMNS: Tuple[str, ...] = (
    "episode",
    "generation_accuracy",
    "defect_detection_rate",
    "false_positive_rate",
    "requirement_coverage",
    *REWARD_COLUMNS,
)
PPO_COLUMNS: Tuple[str, ...] = ("role", *REPORT_COLUMNS)
LEARNING_CURVE_COLUMNS: Tuple[str, ...] = ("week", "episodes", "mean_reward", "mean_detection_rate")
ABLATION_COLUMNS: Tuple[str, ...] = (
    "variant",
    "n_seeds",
    "detection_rate_mean",
    "detection_rate_std",
    "reward_mean",
    "reward_std",
    *(f"r_{name}" for name in COMPONENT_NAMES),
)
ABLATION_RUN_COLUMNS: Tuple[str, ...] = ("variant", "seed", "detection_rate", "reward")
ABLATION_VARIANTS: Tuple[AblationFlags, ...] = (AblationFlags(), *AblationFlags.single_ablations())


@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    generation_accuracy: float
    defect_detection_rate: float
    false_positive_rate: float
    requirement_coverage: float
    reward: RewardBreakdown

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "episode": self.episode,
            "generation_accuracy": self.generation_accuracy,
            "defect_detection_rate": self.defect_detection_rate,
            "false_positive_rate": self.false_positive_rate,
            "requirement_coverage": self.requirement_coverage,
        }
        for name, value in self.reward.to_dict().items():
            row[f"r_{name}"] = value
        return row

    @staticmethod
    def from_row(row: Mapping[str, Any]) -> "EpisodeMetrics":
        return EpisodeMetrics(
            episode=int(row["episode"]),
            generation_accuracy=float(row["generation_accuracy"]),
            defect_detection_rate=float(row["defect_detection_rate"]),
            false_positive_rate=float(row["false_positive_rate"]),
            requirement_coverage=float(row["requirement_coverage"]),
            reward=RewardBreakdown.from_dict({k[2:]: row[k] for k in REWARD_COLUMNS}),
        )


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def episode_metrics(
    episode: int,
    n_requirements: int,
    feedback_events: Sequence[Mapping[str, Any]],
    reward_events: Sequence[Mapping[str, Any]],
) -> EpisodeMetrics:
    """Aggregates one episode from its feedback and reward events.

    The same function serves the live loop and the event-log re-derivation.
    """
    detected: set = set()
    reachable: Dict[str, int] = {}
    touched: set = set()
    for event in feedback_events:
        detected.update(event["detected"])
        reachable.update(event["reachable"])
        touched.update(event["requirement_refs"])
    reward = RewardBreakdown.from_dict(
        {name: _mean([float(e[name]) for e in reward_events]) for name in (*COMPONENT_NAMES, "total")}
    )
    # every defect belongs to one requirement, so per-requirement counts add up
    n_reachable = sum(reachable.values())
    return EpisodeMetrics(
        episode=episode,
        generation_accuracy=_mean([1.0 if e["quality_rating"] >= 0.5 else 0.0 for e in feedback_events]),
        defect_detection_rate=len(detected) / n_reachable if n_reachable else 0.0,
        false_positive_rate=_mean([1.0 if e["false_positives"] > 0 else 0.0 for e in feedback_events]),
        requirement_coverage=len(touched) / n_requirements if n_requirements else 0.0,
        reward=reward,
    )


def _feedback_event(
    episode: int, slot: int, test: TestCase, record: FeedbackRecord, project: SyntheticProject
) -> Dict[str, Any]:
    return {
        "type": "feedback",
        "episode": episode,
        "slot": slot,
        "test_case_ref": test.id,
        "requirement_refs": list(test.requirement_refs),
        "strategy": str(test.strategy),
        "retrieval_mode": str(test.retrieval_mode),
        "quality_rating": record.quality_rating,
        "detected": sorted(d.defect_ref for d in record.true_defects if d.defect_ref is not None),
        "false_positives": len(record.false_positives),
        "reachable": reachable_defect_counts(project, test.requirement_refs),
    }


def read_events(path: PathLike) -> List[Dict[str, Any]]:
    events: List[Dict[str, Any]] = []
    for number, line in iter_lines(path, module="trainer"):
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError as e:
            logger.error("Malformed event at line %d of %s", number, path)
            raise ParseError(f"line {number}: malformed event ({e.msg})", line=number, module="trainer") from e
    return events


def metrics_from_events(events: Iterable[Mapping[str, Any]]) -> List[EpisodeMetrics]:
    """Re-derives per-episode metrics from an event log. Aborted episodes are skipped."""
    n_requirements: Dict[int, int] = {}
    feedback: Dict[int, List[Mapping[str, Any]]] = {}
    rewards: Dict[int, List[Mapping[str, Any]]] = {}
    completed: List[int] = []
    for event in events:
        kind, episode = event.get("type"), event.get("episode")
        if kind == "episode_start":
            n_requirements[episode] = int(event["n_requirements"])
            feedback[episode], rewards[episode] = [], []
        elif kind == "feedback":
            feedback[episode].append(event)
        elif kind == "reward":
            rewards[episode].append(event)
        elif kind == "episode_end":
            completed.append(episode)
    return [episode_metrics(e, n_requirements[e], feedback[e], rewards[e]) for e in completed]


def write_metrics(path: PathLike, metrics: Sequence[EpisodeMetrics]) -> None:
    raise_if(len(metrics) == 0, EmptyRun("No completed episodes to export", module="trainer"))
    write_csv(path, METRICS_COLUMNS, (m.to_row() for m in metrics))


def learning_curve(metrics: Sequence[EpisodeMetrics], week_size: int = WEEK_SIZE) -> List[Dict[str, Any]]:
    """Per-week means, a week being a block of `week_size` consecutive episodes."""
    weeks = []
    for week, start in enumerate(range(0, len(metrics), week_size), start=1):
        block = metrics[start : start + week_size]
        weeks.append(
            {
                "week": week,
                "episodes": len(block),
                "mean_reward": _mean([m.reward.total for m in block]),
                "mean_detection_rate": _mean([m.defect_detection_rate for m in block]),
            }
        )
    return weeks


def final_window(metrics: Sequence[EpisodeMetrics], window: int = FINAL_WINDOW) -> Tuple[float, float]:
    """(mean detection rate, mean reward) over the last `window` episodes."""
    raise_if(len(metrics) == 0, EmptyRun("No episodes to summarise", module="trainer"))
    tail = metrics[-window:]
    return _mean([m.defect_detection_rate for m in tail]), _mean([m.reward.total for m in tail])


@dataclass(frozen=True)
class EpisodeResult:
    metrics: EpisodeMetrics
    transitions: Tuple[Transition, ...]


class LearningSystem:
    """Everything one run mutates: knowledge store, agents, tracker, DQN, counters and logs."""

    def __init__(self, config: RunConfig, out_dir: Optional[PathLike] = None) -> None:
        self.config = config
        self.streams = RngStreams(config.rl.seed)
        self.project = generate_project(config.env, config.seed)
        self.requirements: Dict[str, Requirement] = {r.id: r for r in self.project.requirements}
        self.kb: KnowledgeStore = seed_knowledge_store(self.project, config.kb)
        init_rng = self.streams.get("init")
        self.agents: Dict[AgentRole, Agent] = {
            role: Agent.create(role, config.ppo, init_rng, config.rl.hidden) for role in AgentRole
        }
        self.tracker = PerformanceTracker(config.agents.window)
        self.dqn = DQNController(config.dqn, config.rl.discount_factor, init_rng, hidden=config.rl.hidden)
        self.episode = 0
        self.slot_count = 0
        self.reward_history: List[float] = []
        self.kb_rewards: List[float] = []
        self.kb_fp_rates: List[float] = []
        self.metrics: List[EpisodeMetrics] = []
        self.ppo_rows: List[Dict[str, Any]] = []
        self.dqn_rows: List[Dict[str, Any]] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.events_log: Optional[JsonlAppender] = None
        self.feedback_log: Optional[JsonlAppender] = None
        self.test_log: Optional[JsonlAppender] = None
        if self.out_dir is not None:
            self.events_log = JsonlAppender(self.out_dir / EVENTS_FILE)
            self.feedback_log = JsonlAppender(self.out_dir / FEEDBACK_FILE)
            self.test_log = JsonlAppender(self.out_dir / TEST_CASES_FILE)

    def reset_logs(self) -> None:
        for log in (self.events_log, self.feedback_log, self.test_log):
            if log is not None:
                log.reset()

    def flush(
        self,
        events: Sequence[Mapping[str, Any]],
        feedback: Sequence[FeedbackRecord],
        tests: Sequence[TestCase],
    ) -> None:
        if self.events_log is not None:
            self.events_log.append(events)
        if self.feedback_log is not None:
            self.feedback_log.append(r.to_dict() for r in feedback)
        if self.test_log is not None:
            self.test_log.append(t.to_dict() for t in tests)

    def write_artifacts(self) -> None:
        if self.out_dir is None:
            return
        write_metrics(self.out_dir / METRICS_FILE, self.metrics)
        write_csv(self.out_dir / PPO_UPDATES_FILE, PPO_COLUMNS, self.ppo_rows)
        write_csv(self.out_dir / DQN_UPDATES_FILE, DIAGNOSTIC_COLUMNS, self.dqn_rows)
        write_csv(self.out_dir / LEARNING_CURVE_FILE, LEARNING_CURVE_COLUMNS, learning_curve(self.metrics))
        self.kb.save(self.out_dir / KB_SNAPSHOT_FILE)
        checkpoint(self, self.out_dir / CHECKPOINT_FILE)

    def to_dict(self) -> Dict[str, Any]:
        def lines(log: Optional[JsonlAppender]) -> int:
            return log.lines_written if log is not None else 0

        return {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "config": config_to_dict(self.config),
            "episode": self.episode,
            "slot_count": self.slot_count,
            "reward_history": list(self.reward_history),
            "kb_rewards": list(self.kb_rewards),
            "kb_fp_rates": list(self.kb_fp_rates),
            "agents": {str(role): agent.to_dict() for role, agent in self.agents.items()},
            "tracker": self.tracker.to_dict(),
            "dqn": self.dqn.to_dict(),
            "kb": self.kb.to_dict(),
            "metrics": [m.to_row() for m in self.metrics],
            "ppo_rows": list(self.ppo_rows),
            "dqn_rows": list(self.dqn_rows),
            "rng": self.streams.state_dict(),
            "logs": {
                "events": lines(self.events_log),
                "feedback": lines(self.feedback_log),
                "test_cases": lines(self.test_log),
            },
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any], out_dir: Optional[PathLike] = None) -> "LearningSystem":
        version = data.get("schema_version") if isinstance(data, Mapping) else None
        if version != CHECKPOINT_SCHEMA_VERSION:
            logger.error("Checkpoint schema_version %r unsupported", version)
            raise SchemaVersionMismatch(
                f"Checkpoint schema_version {version!r}, expected {CHECKPOINT_SCHEMA_VERSION}",
                module="trainer",
            )
        try:
            config = build_config(data["config"])
            system = LearningSystem(config, out_dir)
            system.episode = int(data["episode"])
            system.slot_count = int(data["slot_count"])
            system.reward_history = [float(r) for r in data["reward_history"]]
            system.kb_rewards = [float(r) for r in data["kb_rewards"]]
            system.kb_fp_rates = [float(r) for r in data["kb_fp_rates"]]
            system.agents = {
                AgentRole.from_name(name): Agent.from_dict(agent, config.ppo)
                for name, agent in data["agents"].items()
            }
            system.tracker = PerformanceTracker.from_dict(data["tracker"])
            system.dqn = DQNController.from_dict(data["dqn"], config.dqn, config.rl.discount_factor)
            system.kb = KnowledgeStore.from_dict(data["kb"], config.kb)
            system.metrics = [EpisodeMetrics.from_row(row) for row in data["metrics"]]
            system.ppo_rows = [dict(row) for row in data["ppo_rows"]]
            system.dqn_rows = [dict(row) for row in data["dqn_rows"]]
            system.streams = RngStreams.from_state_dict(data["rng"])
            logs = data["logs"]
        except (KeyError, TypeError, ValueError) as e:
            logger.error("Malformed checkpoint: %r", e)
            raise ParseError(f"Malformed checkpoint: {e!r}", module="trainer") from e
        for log, name in (
            (system.events_log, "events"),
            (system.feedback_log, "feedback"),
            (system.test_log, "test_cases"),
        ):
            if log is not None:
                log.truncate(int(logs[name]))
        return system


def checkpoint(system: LearningSystem, path: PathLike) -> None:
    """Atomically persists the full system state."""
    write_json_atomic(path, system.to_dict())
    logger.info("Checkpoint after episode %d written to %s", system.episode, path)


def restore(path: PathLike, out_dir: Optional[PathLike] = None) -> LearningSystem:
    """Rebuilds a system from a checkpoint. Logs in `out_dir` are rewound to the checkpoint."""
    system = LearningSystem.from_dict(read_json(path, module="trainer"), out_dir)
    logger.info("Restored checkpoint %s at episode %d", path, system.episode)
    return system


def _act_all(
    system: LearningSystem,
    roles: Sequence[AgentRole],
    requirement: Requirement,
    rng: np.random.Generator,
    deterministic: bool,
) -> Tuple[Dict[AgentRole, np.ndarray], Dict[AgentRole, AgentAction]]:
    states = {role: featurize_state(requirement, role, system.tracker, system.kb) for role in roles}
    actions = {role: system.agents[role].act(states[role], rng, deterministic) for role in roles}
    return states, actions


def _evolve_knowledge(system: LearningSystem, emission: Emission, batch: Sequence[FeedbackRecord]) -> None:
    kb = system.kb
    severity_weights = system.config.rewards.severity_weights
    for test, record in zip(emission.test_cases, batch):
        kb.reinforce_edges(record, (*test.requirement_refs, *test.context_refs), kb.config.edge_learning_rate)
        if record.true_defects:
            weight = max(severity_weights.weight(d.severity) for d in record.true_defects)
            requirement = system.requirements[test.requirement_refs[0]]
            kb.ingest_test_case(
                test,
                record,
                requirement_tokens(requirement, str(test.strategy)),
                weight / severity_weights.max_weight,
            )


def _kb_step(
    system: LearningSystem, hit_rate: float, episode: int, slot: int, events: List[Dict[str, Any]]
) -> None:
    """Closes the previous KB decision with the interval's mean reward and takes the next one."""
    dqn, kb = system.dqn, system.kb
    mean_reward = _mean(system.kb_rewards)
    state = kb_state_vector(kb.params, mean_reward, _mean(system.kb_fp_rates), hit_rate)
    dqn.observe(mean_reward, state)
    result = dqn.train(system.streams.child("dqn-train", dqn.train_steps))
    decision = dqn.decide(state, system.streams.child("dqn", dqn.steps))
    kb.apply_action(decision.action)
    system.kb_rewards.clear()
    system.kb_fp_rates.clear()
    row = {
        "step": decision.step,
        "epsilon": decision.epsilon,
        "loss": result.loss if result is not None else "",
        "mean_q": decision.mean_q,
        "chosen_action": str(decision.action),
    }
    system.dqn_rows.append(row)
    events.append({"type": "kb_action", "episode": episode, "slot": slot, **row})
    logger.debug("KB action %s at step %d (epsilon %.3f)", decision.action, decision.step, decision.epsilon)


def _run_slot(
    system: LearningSystem,
    episode: int,
    slot: int,
    n_tests: int,
    rng: np.random.Generator,
    events: List[Dict[str, Any]],
    learn: bool,
) -> Tuple[List[Transition], List[FeedbackRecord], Tuple[TestCase, ...]]:
    config, kb, flags = system.config, system.kb, system.config.ablation
    requirement = system.project.requirements[int(rng.integers(len(system.project.requirements)))]
    emitter = (
        AgentRole.IntegrationPoint
        if (slot + 1) % config.agents.integration_every == 0
        else AgentRole.TestCaseGeneration
    )
    roles = (*MODIFIER_ROLES, emitter)
    states, actions = _act_all(
        system, roles, requirement, system.streams.child("act", episode, slot), not learn
    )
    for role in roles:
        events.append(
            {
                "type": "action",
                "episode": episode,
                "slot": slot,
                "role": str(role),
                "requirement": requirement.id,
                "action": actions[role].label,
                "index": actions[role].index,
                "log_prob": actions[role].log_prob,
            }
        )

    emission = generate_test_cases(
        actions[emitter],
        requirement,
        kb,
        kb.params,
        n_tests=n_tests,
        shaping=Shaping.from_actions(actions),
        requirements=system.requirements,
        d_cov=config.env.d_cov,
        salt=f"{episode}:{slot}",
    )
    catalog = ProjectCatalog(system.project.requirements, emission.test_cases)
    batch: List[FeedbackRecord] = []
    for index, test in enumerate(emission.test_cases):
        env_rng = system.streams.child("env", episode, slot, index)
        record = validate_feedback(execute_test(test, system.project, config.env.execution, env_rng), catalog)
        batch.append(record)
        events.append(_feedback_event(episode, slot, test, record, system.project))

    reward = compute_reward(batch, system.reward_history, config.rewards, scalar=flags.scalar_reward)
    system.reward_history.append(reward.total)
    del system.reward_history[:-HISTORY_LIMIT]
    events.append({"type": "reward", "episode": episode, "slot": slot, **reward.to_dict()})

    if learn and not flags.no_feedback:
        _evolve_knowledge(system, emission, batch)

    transitions = []
    for role in roles:
        agent = system.agents[role]
        transition = record_feedback(
            agent, system.tracker, batch, reward, states[role], actions[role], requirement, kb
        )
        transitions.append(transition)
        if not learn or flags.disable_ppo:
            continue
        agent.learner.rollout.append(transition)
        if agent.learner.ready():
            report = agent.learner.update(
                config.rl.discount_factor,
                config.rl.gae_lambda,
                system.streams.child("ppo", role.code, agent.learner.updates),
            )
            row = {"role": str(role), **report.to_dict()}
            system.ppo_rows.append(row)
            events.append({"type": "ppo_update", "episode": episode, **row})
            logger.info(
                "PPO update %d for %s: clip=%.3f entropy=%.4f",
                report.update_index,
                role,
                report.clip_fraction,
                report.entropy,
            )

    hit_rate = kb.retrieval_hit_rate(emission.context, coverage_footprint(requirement, config.env.d_cov))
    system.slot_count += 1
    system.kb_rewards.append(reward.total)
    system.kb_fp_rates.append(_mean([1.0 if r.false_positives else 0.0 for r in batch]))
    if learn and not flags.disable_dqn and system.slot_count % config.kb_action_interval == 0:
        _kb_step(system, hit_rate, episode, slot, events)
    return transitions, batch, emission.test_cases


def run_episode(system: LearningSystem, *, learn: bool = True) -> EpisodeResult:
    """One episode of exactly tests_per_episode executed tests.

    learn=False acts greedily and leaves policies, Q-network and knowledge store untouched.
    On failure the partial event log is persisted before the error propagates.
    """
    config = system.config
    episode = system.episode
    rng = system.streams.child("episode", episode)
    events: List[Dict[str, Any]] = [
        {"type": "episode_start", "episode": episode, "n_requirements": len(system.project.requirements)}
    ]
    transitions: List[Transition] = []
    feedback: List[FeedbackRecord] = []
    tests: List[TestCase] = []
    remaining, slot = config.tests_per_episode, 0
    try:
        while remaining > 0:
            n_tests = min(config.agents.n_tests, remaining)
            slot_transitions, batch, slot_tests = _run_slot(system, episode, slot, n_tests, rng, events, learn)
            transitions.extend(slot_transitions)
            feedback.extend(batch)
            tests.extend(slot_tests)
            remaining -= n_tests
            slot += 1
        metrics = episode_metrics(
            episode,
            len(system.project.requirements),
            [e for e in events if e["type"] == "feedback"],
            [e for e in events if e["type"] == "reward"],
        )
        events.append({"type": "episode_end", **metrics.to_row()})
    except QerlError as e:
        logger.error("Episode %d aborted at slot %d: %s", episode, slot, e.describe())
        events.append({"type": "episode_aborted", "episode": episode, "slot": slot, "error": str(e)})
        system.flush(events, feedback, tests)
        raise
    system.flush(events, feedback, tests)
    system.metrics.append(metrics)
    system.episode += 1
    logger.info(
        "Episode %d: detection=%.3f accuracy=%.3f reward=%.4f",
        episode,
        metrics.defect_detection_rate,
        metrics.generation_accuracy,
        metrics.reward.total,
    )
    return EpisodeResult(metrics, tuple(transitions))


def train(system: LearningSystem, episodes: int, progress: Optional[SupportsProgress] = None) -> LearningSystem:
    for _ in range(episodes):
        run_episode(system)
        if progress is not None:
            progress.update(1)
    return system


def run_training(
    config: RunConfig,
    out_dir: Optional[PathLike] = None,
    progress: Optional[SupportsProgress] = None,
) -> LearningSystem:
    """Fresh run of config.episode_count episodes; artifacts go to `out_dir` when given."""
    start = time.perf_counter()
    system = LearningSystem(config, out_dir)
    system.reset_logs()
    with run_log(out_dir) if out_dir is not None else nullcontext():
        logger.info(
            "Training %s: seed=%d episodes=%d tests/episode=%d",
            config.ablation.name,
            config.seed,
            config.episode_count,
            config.tests_per_episode,
        )
        if progress is not None:
            progress.total = config.episode_count
        try:
            train(system, config.episode_count, progress)
            system.write_artifacts()
        finally:
            logger.info(
                "Training finished in %.3fs after %d episodes", time.perf_counter() - start, system.episode
            )
    return system


def evaluate(
    checkpoint_path: PathLike, episodes: int, out_dir: Optional[PathLike] = None
) -> List[EpisodeMetrics]:
    """Greedy episodes from a checkpoint with learning disabled. The checkpoint is not modified."""
    system = restore(checkpoint_path)
    metrics = [run_episode(system, learn=False).metrics for _ in range(episodes)]
    if out_dir is not None:
        write_metrics(Path(out_dir) / EVALUATION_FILE, metrics)
    return metrics


def export_metrics(events_path: PathLike, out_path: PathLike) -> List[EpisodeMetrics]:
    """Re-derives the metrics CSV from an event log."""
    metrics = metrics_from_events(read_events(events_path))
    write_metrics(out_path, metrics)
    logger.info("Exported %d episodes from %s to %s", len(metrics), events_path, out_path)
    return metrics


@dataclass(frozen=True)
class ReplaySummary:
    records: int
    rejected: int
    edges_reinforced: int
    tests_ingested: int
    mean_reward: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "records": self.records,
            "rejected": self.rejected,
            "edges_reinforced": self.edges_reinforced,
            "tests_ingested": self.tests_ingested,
            "mean_reward": self.mean_reward,
        }


def load_test_cases(path: PathLike) -> List[TestCase]:
    tests = []
    for number, line in iter_lines(path, module="trainer"):
        try:
            tests.append(TestCase.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            logger.error("Malformed test case at line %d of %s", number, path)
            raise ParseError(f"line {number}: malformed test case ({e!r})", line=number, module="trainer") from e
    return tests


def replay(
    config: RunConfig,
    feedback_path: PathLike,
    tests_path: PathLike,
    out_dir: Optional[PathLike] = None,
    kb: Optional[KnowledgeStore] = None,
) -> Tuple[KnowledgeStore, ReplaySummary]:
    """Feeds recorded QE feedback through the reward and knowledge-evolution path, no simulator.

    Rejected lines are logged and skipped; the input files are only read.
    """
    project = generate_project(config.env, config.seed)
    kb = kb or seed_knowledge_store(project, config.kb)
    tests = {t.id: t for t in load_test_cases(tests_path)}
    catalog = ProjectCatalog(project.requirements, (*project.legacy_tests, *tests.values()))
    severity_weights = config.rewards.severity_weights
    rejected: List[QerlError] = []
    history: List[float] = []
    records = reinforced = ingested = 0
    for record in replay_feedback(feedback_path, catalog, on_error=rejected.append):
        records += 1
        test = catalog.test_cases[record.test_case_ref]
        reward = compute_reward([record], history, config.rewards, scalar=config.ablation.scalar_reward)
        history.append(reward.total)
        reinforced += kb.reinforce_edges(
            record, (*test.requirement_refs, *test.context_refs), kb.config.edge_learning_rate
        )
        if record.true_defects:
            weight = max(severity_weights.weight(d.severity) for d in record.true_defects)
            requirement = project.requirement(test.requirement_refs[0])
            if kb.ingest_test_case(
                test,
                record,
                requirement_tokens(requirement, str(test.strategy)),
                weight / severity_weights.max_weight,
            ):
                ingested += 1
    summary = ReplaySummary(records, len(rejected), reinforced, ingested, _mean(history))
    logger.info(
        "Replayed %d records (%d rejected), reinforced %d edges, ingested %d tests",
        records,
        len(rejected),
        reinforced,
        ingested,
    )
    if out_dir is not None:
        kb.save(Path(out_dir) / KB_SNAPSHOT_FILE)
        write_json_atomic(Path(out_dir) / REPLAY_SUMMARY_FILE, summary.to_dict())
    return kb, summary


@dataclass(frozen=True)
class AblationRun:
    variant: str
    seed: int
    detection_rate: float
    reward: float
    components: Tuple[float, ...]

    def to_row(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "detection_rate": self.detection_rate,
            "reward": self.reward,
        }


@dataclass(frozen=True)
class AblationRow:
    variant: str
    n_seeds: int
    detection_rate_mean: float
    detection_rate_std: float
    reward_mean: float
    reward_std: float
    components: Tuple[float, ...]

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {
            "variant": self.variant,
            "n_seeds": self.n_seeds,
            "detection_rate_mean": self.detection_rate_mean,
            "detection_rate_std": self.detection_rate_std,
            "reward_mean": self.reward_mean,
            "reward_std": self.reward_std,
        }
        for name, value in zip(COMPONENT_NAMES, self.components):
            row[f"r_{name}"] = value
        return row


def run_variant(config: RunConfig) -> AblationRun:
    system = train(LearningSystem(config), config.episode_count)
    detection, reward = final_window(system.metrics)
    tail = system.metrics[-FINAL_WINDOW:]
    components = tuple(_mean([m.reward.components()[i] for m in tail]) for i in range(len(COMPONENT_NAMES)))
    return AblationRun(config.ablation.name, config.seed, detection, reward, components)


def summarize_ablation(runs: Sequence[AblationRun]) -> List[AblationRow]:
    rows = []
    variants = list(dict.fromkeys(r.variant for r in runs))
    for variant in variants:
        group = [r for r in runs if r.variant == variant]
        detection = np.array([r.detection_rate for r in group])
        reward = np.array([r.reward for r in group])
        ddof = 1 if len(group) > 1 else 0
        rows.append(
            AblationRow(
                variant=variant,
                n_seeds=len(group),
                detection_rate_mean=_mean(detection.tolist()),
                detection_rate_std=float(detection.std(ddof=ddof)),
                reward_mean=_mean(reward.tolist()),
                reward_std=float(reward.std(ddof=ddof)),
                components=tuple(
                    _mean([r.components[i] for r in group]) for i in range(len(COMPONENT_NAMES))
                ),
            )
        )
    return rows


def run_ablation_suite(
    base: RunConfig,
    n_seeds: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
    progress: Optional[SupportsProgress] = None,
) -> List[AblationRow]:
    """Full system plus the four single-flag ablations over n_seeds consecutive seeds."""
    n_seeds = n_seeds or base.n_seeds
    jobs = [
        ((v, s), base.with_ablation(flags).with_seed(base.seed + s))
        for v, flags in enumerate(ABLATION_VARIANTS)
        for s in range(n_seeds)
    ]
    logger.info("Running ablation suite: %d variants x %d seeds", len(ABLATION_VARIANTS), n_seeds)
    labels = {key: f"Ablation '{config.ablation.name}' seed {config.seed}" for key, config in jobs}
    results = run_keyed_jobs(run_variant, jobs, base.n_workers, describe=labels.__getitem__, progress=progress)
    runs: List[AblationRun] = []
    for key, _ in jobs:
        outcome = results[key]
        if isinstance(outcome, BaseException):
            raise outcome
        runs.append(outcome)
    table = summarize_ablation(runs)
    if out_dir is not None:
        write_csv(Path(out_dir) / ABLATION_FILE, ABLATION_COLUMNS, (row.to_row() for row in table))
        write_csv(Path(out_dir) / ABLATION_RUNS_FILE, ABLATION_RUN_COLUMNS, (r.to_row() for r in runs))
    return table


__all__ = [
    "CHECKPOINT_SCHEMA_VERSION",
    "FINAL_WINDOW",
    "WEEK_SIZE",
    "METRICS_FILE",
    "EVENTS_FILE",
    "PPO_UPDATES_FILE",
    "DQN_UPDATES_FILE",
    "FEEDBACK_FILE",
    "TEST_CASES_FILE",
    "KB_SNAPSHOT_FILE",
    "CHECKPOINT_FILE",
    "LEARNING_CURVE_FILE",
    "EVALUATION_FILE",
    "ABLATION_FILE",
    "ABLATION_RUNS_FILE",
    "REPLAY_SUMMARY_FILE",
    "METRICS_COLUMNS",
    "ABLATION_COLUMNS",
    "ABLATION_VARIANTS",
    "EpisodeMetrics",
    "episode_metrics",
    "read_events",
    "metrics_from_events",
    "write_metrics",
    "learning_curve",
    "final_window",
    "EpisodeResult",
    "LearningSystem",
    "checkpoint",
    "restore",
    "run_episode",
    "train",
    "run_training",
    "evaluate",
    "export_metrics",
    "ReplaySummary",
    "load_test_cases",
    "replay",
    "AblationRun",
    "AblationRow",
    "run_variant",
    "summarize_ablation",
    "run_ablation_suite",
]
