import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .domain import (
    D_COV_DEFAULT,
    STRATEGY_PROFILES,
    AgentRole,
    FeedbackRecord,
    GenerationStrategy,
    Requirement,
    RetrievalMode,
    TestCase,
    content_id,
    coverage_footprint,
    place_on_footprint,
    requirement_tokens,
)
from .errors import RangeViolation, raise_if
from .knowledge_store import ContextItem, EdgeType, KnowledgeStore, RetrievalParams, embed
from .ppo import PPOConfig, PPOLearner
from .rewards import RewardBreakdown, adaptation_reward
from .rl_core import DEFAULT_HIDDEN, Transition, sample_action

logger = logging.getLogger(__name__)

STATE_DIM: int = 16
POLICY_INPUT_DIM: int = STATE_DIM + AgentRole.size()
WINDOW: int = 50
SIGNATURE_BLEND: float = 0.6
CONTEXT_BLEND: float = 0.4

ACTION_LABELS: Dict[AgentRole, Tuple[str, ...]] = {
    AgentRole.TestCaseGeneration: tuple(
        f"{s}/{m}" for s in GenerationStrategy for m in RetrievalMode
    ),
    AgentRole.IntegrationPoint: ("DirectInterface", "DependencyChain", "ImpactSweep", "ContractCheck"),
    AgentRole.LegacyTestAnalysis: ("Balanced", "Sharpen", "Broaden"),
    AgentRole.FunctionalChangeMapping: ("FullFootprint", "CoreFootprint", "ExtendedFootprint"),
    AgentRole.ComplianceValidation: ("Skip", "Lightweight", "Standard", "Strict"),
}

# IntegrationPoint action -> (strategy, retrieval mode, related-requirement edge type)
INTEGRATION_PLANS: Tuple[Tuple[GenerationStrategy, RetrievalMode, Optional[EdgeType]], ...] = (
    (GenerationStrategy.Integration, RetrievalMode.GraphOnly, None),
    (GenerationStrategy.Integration, RetrievalMode.Hybrid, EdgeType.DependsOn),
    (GenerationStrategy.Negative, RetrievalMode.Hybrid, EdgeType.Impacts),
    (GenerationStrategy.Boundary, RetrievalMode.VectorOnly, None),
)

EMITTING_ROLES: Tuple[AgentRole, ...] = (AgentRole.TestCaseGeneration, AgentRole.IntegrationPoint)
MODIFIER_ROLES: Tuple[AgentRole, ...] = (
    AgentRole.LegacyTestAnalysis,
    AgentRole.FunctionalChangeMapping,
    AgentRole.ComplianceValidation,
)


def action_space_size(role: AgentRole) -> int:
    return len(ACTION_LABELS[role])


@dataclass(frozen=True)
class AgentAction:
    role: AgentRole
    index: int
    log_prob: float

    def __post_init__(self) -> None:
        raise_if(
            not (0 <= self.index < action_space_size(self.role)),
            RangeViolation(
                f"Action {self.index} outside the {self.role} action space",
                key="action",
                module="agents",
            ),
        )

    @property
    def label(self) -> str:
        return ACTION_LABELS[self.role][self.index]


@dataclass(frozen=True)
class EmissionPlan:
    """What an emitting action asks for: strategy, retrieval mode, optional related requirement."""

    strategy: GenerationStrategy
    mode: RetrievalMode
    expand_along: Optional[EdgeType] = None


def emission_plan(action: AgentAction) -> EmissionPlan:
    if action.role is AgentRole.TestCaseGeneration:
        strategy_code, mode_code = divmod(action.index, RetrievalMode.size())
        return EmissionPlan(GenerationStrategy.from_code(strategy_code), RetrievalMode.from_code(mode_code))
    if action.role is AgentRole.IntegrationPoint:
        return EmissionPlan(*INTEGRATION_PLANS[action.index])
    raise RangeViolation(f"{action.role} does not emit test cases", key="role", module="agents")


@dataclass(frozen=True)
class Shaping:
    """Modifier-role decisions applied to an emission."""

    signature_mode: int = 0
    footprint_mode: int = 0
    compliance_checks: int = 0

    @staticmethod
    def from_actions(actions: Mapping[AgentRole, AgentAction]) -> "Shaping":
        def pick(role: AgentRole) -> int:
            return actions[role].index if role in actions else 0

        return Shaping(
            pick(AgentRole.LegacyTestAnalysis),
            pick(AgentRole.FunctionalChangeMapping),
            pick(AgentRole.ComplianceValidation),
        )


def shaped_profile(strategy: GenerationStrategy, shaping: Shaping) -> np.ndarray:
    profile = np.array(STRATEGY_PROFILES[strategy], dtype=np.float64)
    if shaping.signature_mode == 1:
        profile = profile + 0.5 * (profile - profile.mean())
    elif shaping.signature_mode == 2:
        profile = 0.5 * profile + 0.5 * profile.mean()
    if shaping.footprint_mode == 1:
        profile[6:] = 0.0
    elif shaping.footprint_mode == 2:
        profile = profile + 0.15
    return np.clip(profile, 0.0, 1.0)


def strategy_signature(
    requirements: Sequence[Requirement], strategy: GenerationStrategy, shaping: Shaping, d_cov: int
) -> np.ndarray:
    profile = shaped_profile(strategy, shaping)
    signature = np.zeros(d_cov, dtype=np.float64)
    for requirement in requirements:
        signature = np.maximum(
            signature, place_on_footprint(coverage_footprint(requirement, d_cov), profile, d_cov)
        )
    return signature


class PerformanceTracker:
    """Per-role rolling windows of feedback records and rewards."""

    def __init__(self, window: int = WINDOW) -> None:
        self.window = window
        self.feedback: Dict[AgentRole, Deque[FeedbackRecord]] = {
            role: deque(maxlen=window) for role in AgentRole
        }
        self.rewards: Dict[AgentRole, Deque[RewardBreakdown]] = {
            role: deque(maxlen=window) for role in AgentRole
        }

    def push(
        self,
        role: AgentRole,
        feedback: Sequence[FeedbackRecord],
        reward: Optional[RewardBreakdown] = None,
    ) -> None:
        self.feedback[role].extend(feedback)
        if reward is not None:
            self.rewards[role].append(reward)

    def defect_rate(self, role: AgentRole) -> float:
        records = self.feedback[role]
        return sum(1 for r in records if r.true_defects) / len(records) if records else 0.0

    def false_positive_rate(self, role: AgentRole) -> float:
        records = self.feedback[role]
        return sum(1 for r in records if r.false_positives) / len(records) if records else 0.0

    def mean_severity(self, role: AgentRole) -> float:
        ranks = [d.severity.rank for r in self.feedback[role] for d in r.true_defects]
        return sum(ranks) / (4.0 * len(ranks)) if ranks else 0.0

    def mean_quality(self, role: AgentRole) -> float:
        records = self.feedback[role]
        return sum(r.quality_rating for r in records) / len(records) if records else 0.0

    def reward_totals(self, role: AgentRole) -> List[float]:
        return [r.total for r in self.rewards[role]]

    def reward_mean(self, role: AgentRole) -> float:
        totals = self.reward_totals(role)
        return sum(totals) / len(totals) if totals else 0.0

    def reward_trend(self, role: AgentRole) -> float:
        return adaptation_reward(self.reward_totals(role))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window": self.window,
            "feedback": {str(role): [r.to_dict() for r in self.feedback[role]] for role in AgentRole},
            "rewards": {str(role): [r.to_dict() for r in self.rewards[role]] for role in AgentRole},
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "PerformanceTracker":
        tracker = PerformanceTracker(int(data["window"]))
        for role in AgentRole:
            tracker.feedback[role].extend(FeedbackRecord.from_dict(r) for r in data["feedback"][str(role)])
            tracker.rewards[role].extend(RewardBreakdown.from_dict(r) for r in data["rewards"][str(role)])
        return tracker


def requirement_summary(requirement: Requirement, kb: KnowledgeStore) -> np.ndarray:
    """8 public features of a requirement: folded text embedding, linked knowledge, its usefulness."""
    vector = embed(requirement.tokens(), kb.config.d_emb)
    folded = np.array([chunk.sum() for chunk in np.array_split(vector, 6)])
    linked = kb.linked_tests(requirement.id)
    usefulness = [kb.record(t).usefulness for t in linked if kb.has_record(t)]
    return np.concatenate(
        [
            np.tanh(folded),
            [
                min(len(linked) / max(kb.config.max_tests_per_requirement, 1), 1.0),
                float(np.mean(usefulness)) if usefulness else 0.0,
            ],
        ]
    )


def featurize_state(
    requirement: Requirement,
    role: AgentRole,
    tracker: PerformanceTracker,
    kb: KnowledgeStore,
    params: Optional[RetrievalParams] = None,
) -> np.ndarray:
    """16-dim agent state with every entry in [-1, 1]; empty history gives zero aggregates."""
    params = params or kb.params
    state = np.concatenate(
        [
            requirement_summary(requirement, kb),
            [
                tracker.defect_rate(role),
                tracker.false_positive_rate(role),
                tracker.mean_severity(role),
                tracker.mean_quality(role),
                params.similarity_threshold,
                kb.mean_edge_weight(),
                np.tanh(tracker.reward_mean(role)),
                tracker.reward_trend(role),
            ],
        ]
    ).astype(np.float64)
    return np.clip(state, -1.0, 1.0)


class Agent:
    """One RL-enhanced role: a PPO categorical policy over the role's action space."""

    def __init__(self, role: AgentRole, learner: PPOLearner) -> None:
        self.role = role
        self.learner = learner

    @staticmethod
    def create(
        role: AgentRole, config: PPOConfig, rng: np.random.Generator, hidden: Sequence[int] = DEFAULT_HIDDEN
    ) -> "Agent":
        return Agent(role, PPOLearner(POLICY_INPUT_DIM, action_space_size(role), config, rng, hidden))

    @property
    def n_actions(self) -> int:
        return action_space_size(self.role)

    def policy_input(self, state: np.ndarray) -> np.ndarray:
        one_hot = np.zeros(AgentRole.size(), dtype=np.float64)
        one_hot[self.role.code] = 1.0
        return np.concatenate([np.asarray(state, dtype=np.float64), one_hot])

    def act(self, state: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> AgentAction:
        probs, log_probs, _ = self.learner.evaluate(self.policy_input(state))
        if deterministic:
            index = int(np.argmax(probs))
        else:
            index = sample_action(probs, rng)
        return AgentAction(self.role, index, float(log_probs[index]))

    def to_dict(self) -> Dict[str, Any]:
        return {"role": str(self.role), "learner": self.learner.to_dict()}

    @staticmethod
    def from_dict(data: Mapping[str, Any], config: PPOConfig) -> "Agent":
        return Agent(AgentRole.from_name(data["role"]), PPOLearner.from_dict(data["learner"], config))


def act(agent: Agent, state: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> AgentAction:
    return agent.act(state, rng, deterministic)


def related_requirement(
    requirement: Requirement, edge_type: EdgeType, kb: KnowledgeStore
) -> Optional[str]:
    """Strongest out-neighbour of the requirement along edge_type; ties go to the lowest id."""
    if not kb.has_node(requirement.id):
        return None
    candidates = [
        (-float(d["weight"]), target)
        for _, target, key, d in kb.graph.out_edges(requirement.id, keys=True, data=True)
        if key == edge_type.name
    ]
    return min(candidates)[1] if candidates else None


@dataclass(frozen=True)
class Emission:
    test_cases: Tuple[TestCase, ...]
    context: Tuple[ContextItem, ...]
    requirement_refs: Tuple[str, ...] = field(default=())


def generate_test_cases(
    action: AgentAction,
    requirement: Requirement,
    kb: KnowledgeStore,
    params: Optional[RetrievalParams] = None,
    *,
    n_tests: int = 3,
    shaping: Shaping = Shaping(),
    requirements: Optional[Mapping[str, Requirement]] = None,
    d_cov: int = D_COV_DEFAULT,
    salt: str = "",
) -> Emission:
    """Retrieves context and emits n_tests structured test cases sharing one coverage vector.

    coverage = clip(0.6 * signature + 0.4 * mean context coverage). Context items without
    coverage (requirement nodes) are skipped; with no usable context the result is
    0.6 * signature.
    """
    params = params or kb.params
    plan = emission_plan(action)
    referenced = [requirement]
    if plan.expand_along is not None and requirements is not None:
        related = related_requirement(requirement, plan.expand_along, kb)
        if related is not None and related in requirements:
            referenced.append(requirements[related])

    query = embed(requirement_tokens(requirement, str(plan.strategy)), kb.config.d_emb)
    seeds = [r.id for r in referenced if kb.has_node(r.id)]
    context = kb.hybrid_retrieve(query, seeds, plan.mode, params)
    vectors = [kb.node_coverage(item.node_id) for item in context if kb.has_node(item.node_id)]
    usable = [np.asarray(v) for v in vectors if v is not None and len(v) == d_cov]

    signature = strategy_signature(referenced, plan.strategy, shaping, d_cov)
    coverage = SIGNATURE_BLEND * signature
    if usable:
        coverage = coverage + CONTEXT_BLEND * np.mean(usable, axis=0)
    coverage = np.clip(coverage, 0.0, 1.0)
    coverage_tuple = tuple(float(c) for c in coverage)

    refs = tuple(r.id for r in referenced)
    context_refs = tuple(item.node_id for item in context)
    tests = tuple(
        TestCase(
            id=content_id(
                "tc",
                {
                    "refs": list(refs),
                    "strategy": str(plan.strategy),
                    "mode": str(plan.mode),
                    "agent": str(action.role),
                    "coverage": list(coverage_tuple),
                    "compliance": shaping.compliance_checks,
                    "ordinal": ordinal,
                    "salt": salt,
                },
            ),
            requirement_refs=refs,
            strategy=plan.strategy,
            retrieval_mode=plan.mode,
            coverage_vector=coverage_tuple,
            generating_agent=action.role,
            context_refs=context_refs,
            compliance_checks=shaping.compliance_checks,
        )
        for ordinal in range(n_tests)
    )
    logger.debug(
        "%s emitted %d tests for %s via %s/%s with %d context items",
        action.role,
        n_tests,
        requirement.id,
        plan.strategy,
        plan.mode,
        len(context),
    )
    return Emission(tests, tuple(context), refs)


def record_feedback(
    agent: Agent,
    tracker: PerformanceTracker,
    feedback: Union[FeedbackRecord, Sequence[FeedbackRecord]],
    reward: RewardBreakdown,
    state: np.ndarray,
    action: AgentAction,
    requirement: Requirement,
    kb: KnowledgeStore,
) -> Transition:
    """Pushes the tracker windows and returns the rollout transition for the agent's action.

    next_state is featurized after the push, so it reflects the new feedback.
    """
    records = [feedback] if isinstance(feedback, FeedbackRecord) else list(feedback)
    tracker.push(agent.role, records, reward)
    next_state = featurize_state(requirement, agent.role, tracker, kb)
    return Transition(
        state=agent.policy_input(state),
        action=action.index,
        reward=reward.total,
        next_state=agent.policy_input(next_state),
        done=False,
        log_prob_old=action.log_prob,
    )


__all__ = [
    "STATE_DIM",
    "POLICY_INPUT_DIM",
    "WINDOW",
    "ACTION_LABELS",
    "INTEGRATION_PLANS",
    "EMITTING_ROLES",
    "MODIFIER_ROLES",
    "AgentRole",
    "action_space_size",
    "AgentAction",
    "EmissionPlan",
    "emission_plan",
    "Shaping",
    "shaped_profile",
    "strategy_signature",
    "PerformanceTracker",
    "requirement_summary",
    "featurize_state",
    "Agent",
    "act",
    "related_requirement",
    "Emission",
    "generate_test_cases",
    "record_feedback",
]
