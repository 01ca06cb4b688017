import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InsufficientReplay, RangeViolation, raise_if
from .knowledge_store import (
    THRESHOLD_STEP,
    TOP_K_RANGE,
    EdgeType,
    KBAction,
    KBConfig,
    KnowledgeStore,
    RetrievalParams,
    VectorRecord,
)
from .rl_core import (
    DEFAULT_HIDDEN,
    Adam,
    ExperienceBuffer,
    MLPParameters,
    RngStreams,
    Transition,
    backward,
    forward,
)

logger = logging.getLogger(__name__)

KB_STATE_DIM: int = 10
DIAGNOSTIC_COLUMNS: Tuple[str, ...] = ("step", "epsilon", "loss", "mean_q", "chosen_action")


@dataclass(frozen=True)
class DQNConfig:
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync_interval: int = 1_000
    epsilon_start: float = 0.9
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 100_000
    learning_rate: float = 1e-3
    train_steps_per_action: int = 1


def epsilon_at(step: int, config: DQNConfig) -> float:
    """Linear decay from epsilon_start to epsilon_end over epsilon_decay_steps action selections."""
    if step >= config.epsilon_decay_steps:
        return config.epsilon_end
    fraction = max(step, 0) / config.epsilon_decay_steps
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * fraction


def greedy_index(q_values: np.ndarray) -> int:
    """argmax with ties resolved to the lowest index."""
    return int(np.argmax(q_values))


def select_action_index(
    state: np.ndarray, qnet: MLPParameters, epsilon: float, rng: np.random.Generator
) -> Tuple[int, np.ndarray]:
    q_values = forward(qnet, state)
    if rng.random() < epsilon:
        return int(rng.integers(qnet.n_out)), q_values
    return greedy_index(q_values), q_values


def select_kb_action(
    state: np.ndarray,
    qnet: MLPParameters,
    step: int,
    rng: np.random.Generator,
    config: DQNConfig,
    epsilon: Optional[float] = None,
) -> KBAction:
    """epsilon-greedy over the 13 knowledge-store actions; `epsilon` overrides the schedule."""
    eps = epsilon_at(step, config) if epsilon is None else epsilon
    index, _ = select_action_index(state, qnet, eps, rng)
    return KBAction.from_code(index)


@dataclass(frozen=True)
class DQNTrainResult:
    loss: float
    mean_q: float
    synced: bool


def dqn_train_step(
    qnet: MLPParameters,
    target_net: MLPParameters,
    optimizer: Adam,
    replay: ExperienceBuffer,
    config: DQNConfig,
    gamma: float,
    rng: np.random.Generator,
    train_steps_done: int = 0,
) -> DQNTrainResult:
    """One Adam step on mean squared TD error; syncs the target every target_sync_interval steps."""
    raise_if(
        len(replay) < config.batch_size,
        InsufficientReplay(
            f"Replay holds {len(replay)} transitions, batch_size is {config.batch_size}",
            key="replay",
            module="dqn",
        ),
    )
    batch = replay.sample(config.batch_size, rng)
    states = np.stack([t.state for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    not_done = np.array([0.0 if t.done else 1.0 for t in batch])

    targets = rewards + gamma * not_done * forward(target_net, next_states).max(axis=1)
    q_values = forward(qnet, states)
    rows = np.arange(len(batch))
    errors = q_values[rows, actions] - targets
    output_gradient = np.zeros_like(q_values)
    output_gradient[rows, actions] = 2.0 * errors / len(batch)
    optimizer.step(qnet, backward(qnet, states, output_gradient))

    synced = (train_steps_done + 1) % config.target_sync_interval == 0
    if synced:
        target_net.load_from(qnet)
        logger.debug("Target network synced at train step %d", train_steps_done + 1)
    return DQNTrainResult(float(np.mean(errors**2)), float(q_values[rows, actions].mean()), synced)


def kb_state_vector(
    params: RetrievalParams, mean_reward: float, fp_rate: float, hit_rate: float
) -> np.ndarray:
    """10-dim knowledge-base state, every entry in [0, 1]."""
    return np.array(
        [
            params.similarity_threshold,
            params.top_k / 64.0,
            params.traversal_depth / 4.0,
            *(params.type_weight(t) for t in EdgeType),
            0.5 * (math.tanh(mean_reward) + 1.0),
            min(max(fp_rate, 0.0), 1.0),
            min(max(hit_rate, 0.0), 1.0),
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class KBDecision:
    step: int
    epsilon: float
    action: KBAction
    mean_q: float


class DQNController:
    """Online and target Q-networks, replay and counters for knowledge-store control."""

    def __init__(
        self,
        config: DQNConfig,
        gamma: float,
        rng: Optional[np.random.Generator] = None,
        state_dim: int = KB_STATE_DIM,
        n_actions: int = KBAction.size(),
        qnet: Optional[MLPParameters] = None,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        actions: Optional[Sequence[KBAction]] = None,
    ) -> None:
        self.config = config
        self.gamma = gamma
        # output index i selects actions[i]; by default the first n_actions KB actions in code order
        self.actions: Tuple[KBAction, ...] = tuple(actions) if actions is not None else tuple(KBAction)[:n_actions]
        n_actions = len(self.actions)
        if qnet is None:
            if rng is None:
                raise ValueError("DQNController needs either an rng or an initial qnet")
            qnet = MLPParameters.xavier((state_dim, *hidden, n_actions), rng)
        self.qnet = qnet
        self.target_net = qnet.copy()
        self.optimizer = Adam(qnet.flat.size, config.learning_rate)
        self.replay = ExperienceBuffer(config.replay_capacity, state_dim)
        self.steps = 0
        self.train_steps = 0
        self.pending: Optional[Tuple[np.ndarray, int]] = None

    def decide(self, state: np.ndarray, rng: np.random.Generator) -> KBDecision:
        epsilon = epsilon_at(self.steps, self.config)
        index, q_values = select_action_index(state, self.qnet, epsilon, rng)
        decision = KBDecision(self.steps, epsilon, self.actions[index], float(np.mean(q_values)))
        self.steps += 1
        self.pending = (np.asarray(state, dtype=np.float64), index)
        return decision

    def observe(self, reward: float, next_state: np.ndarray, done: bool = False) -> bool:
        """Closes the pending decision into a replay transition."""
        if self.pending is None:
            return False
        state, action = self.pending
        self.replay.push(Transition(state, action, float(reward), next_state, done))
        self.pending = None
        return True

    def train(self, rng: np.random.Generator) -> Optional[DQNTrainResult]:
        if len(self.replay) < self.config.batch_size:
            return None
        result: Optional[DQNTrainResult] = None
        for _ in range(self.config.train_steps_per_action):
            result = dqn_train_step(
                self.qnet,
                self.target_net,
                self.optimizer,
                self.replay,
                self.config,
                self.gamma,
                rng,
                self.train_steps,
            )
            self.train_steps += 1
        return result

    def to_dict(self) -> Dict[str, Any]:
        return {
            "qnet": self.qnet.to_dict(),
            "target_net": self.target_net.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "replay": self.replay.to_dict(),
            "steps": self.steps,
            "train_steps": self.train_steps,
            "pending": None
            if self.pending is None
            else {"state": [float(x) for x in self.pending[0]], "action": self.pending[1]},
        }

    @staticmethod
    def from_dict(data: Dict[str, Any], config: DQNConfig, gamma: float) -> "DQNController":
        controller = DQNController(config, gamma, qnet=MLPParameters.from_dict(data["qnet"]))
        controller.target_net = MLPParameters.from_dict(data["target_net"])
        controller.optimizer = Adam.from_dict(data["optimizer"])
        controller.replay = ExperienceBuffer.from_dict(data["replay"])
        controller.steps = int(data["steps"])
        controller.train_steps = int(data["train_steps"])
        pending = data.get("pending")
        if pending is not None:
            controller.pending = (np.array(pending["state"], dtype=np.float64), int(pending["action"]))
        return controller


THRESHOLD_ACTIONS: Tuple[KBAction, ...] = (KBAction.RaiseThreshold, KBAction.LowerThreshold, KBAction.NoOp)
THRESHOLD_TASK_DQN = DQNConfig(
    replay_capacity=1_000,
    batch_size=16,
    target_sync_interval=50,
    epsilon_start=1.0,
    epsilon_end=0.15,
    epsilon_decay_steps=120,
    learning_rate=1e-3,
    train_steps_per_action=32,
)
THRESHOLD_TASK_GAMMA: float = 0.5
THRESHOLD_TASK_TOLERANCE: float = 0.05


def _planted_embedding(similarity: float, d_emb: int) -> Tuple[float, ...]:
    """Unit vector whose cosine with the first basis vector is exactly `similarity`."""
    vector = [0.0] * d_emb
    vector[0] = similarity
    vector[1] = math.sqrt(1.0 - similarity * similarity)
    return tuple(vector)


class PlantedThresholdTask:
    """Vector retrieval whose best similarity_threshold is known by construction.

    Useful records sit above `optimum` and distractors below it, with a gap of two
    threshold steps around it. A KB step is rewarded with the F1 of the retrieved set
    against the useful records, so quality peaks at the optimum and falls off on both sides.
    """

    def __init__(self, optimum: float = 0.6, n_useful: int = 10, n_distractors: int = 24, d_emb: int = 16) -> None:
        raise_if(
            not (2 * THRESHOLD_STEP < optimum < 1.0 - 2 * THRESHOLD_STEP),
            RangeViolation(f"optimum {optimum} leaves no room for planted records", key="optimum", module="dqn"),
        )
        self.optimum = optimum
        self.store = KnowledgeStore(KBConfig(d_emb=d_emb))
        self.store.params = RetrievalParams(top_k=int(TOP_K_RANGE.high))
        self.query = np.zeros(d_emb, dtype=np.float64)
        self.query[0] = 1.0
        useful = [round(optimum + THRESHOLD_STEP * (1 + 2 * i), 10) for i in range(n_useful)]
        distractors = [round(optimum - THRESHOLD_STEP * (1 + j), 10) for j in range(n_distractors)]
        self.useful: FrozenSet[str] = frozenset(f"useful-{i:02d}" for i, s in enumerate(useful) if s < 1.0)
        for i, similarity in enumerate(useful):
            if similarity < 1.0:
                self._plant(f"useful-{i:02d}", similarity, d_emb)
        for j, similarity in enumerate(distractors):
            if similarity > 0.0:
                self._plant(f"distractor-{j:02d}", similarity, d_emb)

    def _plant(self, record_id: str, similarity: float, d_emb: int) -> None:
        self.store.add_record(VectorRecord(record_id, _planted_embedding(similarity, d_emb), record_id))

    @property
    def threshold(self) -> float:
        return self.store.params.similarity_threshold

    def quality(self) -> Tuple[float, float]:
        """(precision, recall) of the current retrieval."""
        retrieved = [record.id for record, _ in self.store.vector_query(self.query)]
        hits = sum(1 for record_id in retrieved if record_id in self.useful)
        precision = hits / len(retrieved) if retrieved else 0.0
        return precision, hits / len(self.useful)

    def reward(self) -> float:
        precision, recall = self.quality()
        return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    def state(self) -> np.ndarray:
        precision, _ = self.quality()
        return kb_state_vector(self.store.params, self.reward(), 1.0 - precision, precision)

    def step(self, action: KBAction) -> float:
        self.store.apply_action(action)
        return self.reward()


@dataclass(frozen=True)
class ThresholdAdaptation:
    seed: int
    optimum: float
    thresholds: Tuple[float, ...]

    @property
    def final_threshold(self) -> float:
        return self.thresholds[-1]

    @property
    def kb_actions(self) -> int:
        return len(self.thresholds)

    @property
    def error(self) -> float:
        return abs(self.final_threshold - self.optimum)

    @property
    def passed(self) -> bool:
        return self.error <= THRESHOLD_TASK_TOLERANCE + 1e-9

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "optimum": self.optimum,
            "final_threshold": self.final_threshold,
            "kb_actions": self.kb_actions,
            "passed": self.passed,
        }


def adapt_threshold(
    seed: int,
    task: Optional[PlantedThresholdTask] = None,
    kb_actions: int = 200,
    config: DQNConfig = THRESHOLD_TASK_DQN,
    gamma: float = THRESHOLD_TASK_GAMMA,
) -> ThresholdAdaptation:
    """A fresh DQN drives the threshold of a planted task for `kb_actions` steps, learning online."""
    raise_if(kb_actions < 1, RangeViolation("kb_actions must be >= 1", key="kb_actions", module="dqn"))
    task = task or PlantedThresholdTask()
    streams = RngStreams(seed)
    controller = DQNController(config, gamma, streams.get("init"), actions=THRESHOLD_ACTIONS)
    state = task.state()
    thresholds: List[float] = []
    for _ in range(kb_actions):
        decision = controller.decide(state, streams.child("dqn", controller.steps))
        reward = task.step(decision.action)
        state = task.state()
        controller.observe(reward, state)
        controller.train(streams.child("dqn-train", controller.train_steps))
        thresholds.append(task.threshold)
    result = ThresholdAdaptation(seed, task.optimum, tuple(thresholds))
    logger.info(
        "Threshold adaptation seed=%d: %.2f after %d KB actions (optimum %.2f)",
        seed,
        result.final_threshold,
        result.kb_actions,
        result.optimum,
    )
    return result


def run_threshold_suite(n_seeds: int = 3, kb_actions: int = 200) -> List[ThresholdAdaptation]:
    return [adapt_threshold(seed, kb_actions=kb_actions) for seed in range(n_seeds)]


__all__ = [
    "KB_STATE_DIM",
    "DIAGNOSTIC_COLUMNS",
    "KBAction",
    "DQNConfig",
    "epsilon_at",
    "greedy_index",
    "select_action_index",
    "select_kb_action",
    "DQNTrainResult",
    "dqn_train_step",
    "kb_state_vector",
    "KBDecision",
    "DQNController",
    "THRESHOLD_ACTIONS",
    "THRESHOLD_TASK_DQN",
    "THRESHOLD_TASK_GAMMA",
    "THRESHOLD_TASK_TOLERANCE",
    "PlantedThresholdTask",
    "ThresholdAdaptation",
    "adapt_threshold",
    "run_threshold_suite",
]
