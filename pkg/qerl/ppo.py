import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyBatch, LengthMismatch, StaleRollout, raise_if
from .rl_core import (
    DEFAULT_HIDDEN,
    Adam,
    MLPParameters,
    Transition,
    backward,
    forward,
    softmax_policy,
)

logger = logging.getLogger(__name__)

POLICY_HEAD_SCALE: float = 0.01
REPORT_COLUMNS: Tuple[str, ...] = (
    "update_index",
    "mean_ratio",
    "clip_fraction",
    "policy_loss",
    "value_loss",
    "entropy",
)


@dataclass(frozen=True)
class PPOConfig:
    """Bounds are enforced when loading a run configuration, not here."""

    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_update: int = 4
    minibatch_size: int = 64
    rollout_length: int = 256
    value_loss_coeff: float = 0.5
    entropy_coeff: float = 0.01
    allow_out_of_range: bool = False


@dataclass(frozen=True)
class ProcessedRollout:
    transitions: Tuple[Transition, ...]
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.transitions)

    def normalized_advantages(self) -> np.ndarray:
        if len(self.advantages) <= 1:
            return self.advantages.copy()
        return (self.advantages - self.advantages.mean()) / (self.advantages.std() + 1e-8)


@dataclass(frozen=True)
class PPOUpdateReport:
    update_index: int
    mean_ratio: float
    clip_fraction: float
    policy_loss: float
    value_loss: float
    entropy: float

    def to_dict(self) -> Dict[str, Any]:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def compute_gae(
    rollout: Sequence[Transition],
    value_estimates: Sequence[float],
    gamma: float,
    lam: float,
) -> ProcessedRollout:
    """Generalized advantage estimation. value_estimates holds V(s_0..s_{T-1}) plus the bootstrap V(s_T)."""
    raise_if(
        len(value_estimates) != len(rollout) + 1,
        LengthMismatch(
            f"Expected {len(rollout) + 1} value estimates, got {len(value_estimates)}",
            key="value_estimates",
            module="ppo",
        ),
    )
    values = np.asarray(value_estimates, dtype=np.float64)
    advantages = np.zeros(len(rollout), dtype=np.float64)
    running = 0.0
    for t in range(len(rollout) - 1, -1, -1):
        not_done = 0.0 if rollout[t].done else 1.0
        delta = rollout[t].reward + gamma * values[t + 1] * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
    return ProcessedRollout(tuple(rollout), advantages, advantages + values[:-1])


def clipped_surrogate(ratio: Any, advantage: Any, epsilon: float) -> Any:
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A), elementwise for arrays."""
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage)


def init_actor_critic(
    n_in: int,
    n_actions: int,
    rng: np.random.Generator,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
) -> MLPParameters:
    """Shared trunk with n_actions policy logits followed by one value output."""
    params = MLPParameters.xavier((n_in, *hidden, n_actions + 1), rng)
    params.weights[-1][:, :n_actions] *= POLICY_HEAD_SCALE
    return params


def split_outputs(outputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return outputs[..., :-1], outputs[..., -1]


@dataclass(frozen=True)
class SurrogateTerms:
    output_gradient: np.ndarray
    ratios: np.ndarray
    policy_loss: float
    value_loss: float
    entropy: float


def surrogate_gradient(
    params: MLPParameters,
    states: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PPOConfig,
) -> SurrogateTerms:
    """Gradient w.r.t. network outputs of
    -mean(clipped surrogate) + c_v * mean((V - R)^2) - c_e * mean(entropy).
    """
    batch = len(actions)
    logits, values = split_outputs(forward(params, states))
    probs, log_probs = softmax_policy(logits)
    rows = np.arange(batch)
    ratios = np.exp(log_probs[rows, actions] - old_log_probs)
    unclipped = ratios * advantages
    surrogate = clipped_surrogate(ratios, advantages, config.clip_epsilon)
    # the clipped branch is flat in theta
    active = (unclipped <= surrogate).astype(np.float64)

    one_hot = np.zeros_like(probs)
    one_hot[rows, actions] = 1.0
    entropy = -np.sum(probs * log_probs, axis=1)

    grad_logits = -(active * unclipped)[:, None] * (one_hot - probs) / batch
    grad_logits += config.entropy_coeff * probs * (log_probs + entropy[:, None]) / batch
    grad_values = 2.0 * config.value_loss_coeff * (values - returns) / batch

    return SurrogateTerms(
        output_gradient=np.concatenate([grad_logits, grad_values[:, None]], axis=1),
        ratios=ratios,
        policy_loss=float(-np.mean(surrogate)),
        value_loss=float(np.mean((values - returns) ** 2)),
        entropy=float(np.mean(entropy)),
    )


def ppo_update(
    params: MLPParameters,
    optimizer: Adam,
    rollout: ProcessedRollout,
    config: PPOConfig,
    rng: np.random.Generator,
    update_index: int = 0,
) -> PPOUpdateReport:
    """Runs epochs_per_update passes of shuffled minibatch Adam steps in place."""
    raise_if(len(rollout) == 0, EmptyBatch("ppo_update needs a non-empty rollout", module="ppo"))
    if any(t.log_prob_old is None for t in rollout.transitions):
        logger.error("Rollout for update %d lacks old log-probabilities", update_index)
        raise StaleRollout(
            "Rollout transitions are missing log_prob_old", key="log_prob_old", module="ppo"
        )
    states = np.stack([t.state for t in rollout.transitions])
    actions = np.array([t.action for t in rollout.transitions], dtype=np.int64)
    old_log_probs = np.array([t.log_prob_old for t in rollout.transitions], dtype=np.float64)
    advantages = rollout.normalized_advantages()
    returns = rollout.returns

    ratio_sum = clipped = policy_loss = value_loss = entropy = 0.0
    samples = batches = 0
    for _ in range(config.epochs_per_update):
        order = rng.permutation(len(rollout))
        for start in range(0, len(order), config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            terms = surrogate_gradient(
                params, states[idx], actions[idx], old_log_probs[idx], advantages[idx], returns[idx], config
            )
            optimizer.step(params, backward(params, states[idx], terms.output_gradient))
            ratio_sum += float(terms.ratios.sum())
            clipped += float(np.sum(np.abs(terms.ratios - 1.0) > config.clip_epsilon))
            samples += len(idx)
            policy_loss += terms.policy_loss
            value_loss += terms.value_loss
            entropy += terms.entropy
            batches += 1

    report = PPOUpdateReport(
        update_index=update_index,
        mean_ratio=ratio_sum / samples,
        clip_fraction=clipped / samples,
        policy_loss=policy_loss / batches,
        value_loss=value_loss / batches,
        entropy=entropy / batches,
    )
    logger.debug(
        "PPO update %d: ratio=%.4f clip=%.3f policy_loss=%.4f value_loss=%.4f entropy=%.4f",
        update_index,
        report.mean_ratio,
        report.clip_fraction,
        report.policy_loss,
        report.value_loss,
        report.entropy,
    )
    return report


class PPOLearner:
    """A categorical actor-critic policy with its optimizer and pending rollout."""

    def __init__(
        self,
        n_in: int,
        n_actions: int,
        config: PPOConfig,
        rng: Optional[np.random.Generator] = None,
        hidden: Sequence[int] = DEFAULT_HIDDEN,
        params: Optional[MLPParameters] = None,
    ) -> None:
        self.n_in = n_in
        self.n_actions = n_actions
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("PPOLearner needs either an rng or initial params")
            params = init_actor_critic(n_in, n_actions, rng, hidden)
        self.params = params
        self.optimizer = Adam(self.params.flat.size, config.learning_rate)
        self.rollout: List[Transition] = []
        self.updates = 0

    def evaluate(self, state: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
        logits, value = split_outputs(forward(self.params, state))
        probs, log_probs = softmax_policy(logits)
        return probs, log_probs, float(value)

    def value(self, state: np.ndarray) -> float:
        return float(forward(self.params, state)[-1])

    def ready(self) -> bool:
        return len(self.rollout) >= self.config.rollout_length

    def update(self, gamma: float, lam: float, rng: np.random.Generator) -> PPOUpdateReport:
        """Consumes the pending rollout."""
        raise_if(len(self.rollout) == 0, EmptyBatch("No pending rollout", module="ppo"))
        states = np.stack([t.state for t in self.rollout])
        values = list(split_outputs(forward(self.params, states))[1])
        last = self.rollout[-1]
        values.append(0.0 if last.done else self.value(last.next_state))
        processed = compute_gae(self.rollout, values, gamma, lam)
        report = ppo_update(self.params, self.optimizer, processed, self.config, rng, self.updates)
        self.updates += 1
        self.rollout = []
        return report

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_in": self.n_in,
            "n_actions": self.n_actions,
            "params": self.params.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "rollout": [t.to_dict() for t in self.rollout],
            "updates": self.updates,
        }

    @staticmethod
    def from_dict(data: Dict[str, Any], config: PPOConfig) -> "PPOLearner":
        learner = PPOLearner(
            int(data["n_in"]),
            int(data["n_actions"]),
            config,
            params=MLPParameters.from_dict(data["params"]),
        )
        learner.optimizer = Adam.from_dict(data["optimizer"])
        learner.rollout = [Transition.from_dict(t) for t in data["rollout"]]
        learner.updates = int(data["updates"])
        return learner


__all__ = [
    "POLICY_HEAD_SCALE",
    "REPORT_COLUMNS",
    "PPOConfig",
    "ProcessedRollout",
    "PPOUpdateReport",
    "SurrogateTerms",
    "compute_gae",
    "clipped_surrogate",
    "init_actor_critic",
    "split_outputs",
    "surrogate_gradient",
    "ppo_update",
    "PPOLearner",
]
