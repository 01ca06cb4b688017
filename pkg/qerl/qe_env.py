import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .domain import (
    D_COV_DEFAULT,
    STRATEGY_PROFILES,
    AgentRole,
    DefectReport,
    FeedbackRecord,
    GenerationStrategy,
    ProjectCatalog,
    Requirement,
    RetrievalMode,
    Severity,
    TestCase,
    content_id,
    coverage_footprint,
    feedback_from_line,
    place_on_footprint,
    requirement_tokens,
)
from .errors import BadConfig, QerlError, UnknownRequirement, ValidationError, raise_if
from .files import PathLike, iter_lines, read_json, write_json_atomic, write_jsonl
from .knowledge_store import (
    NODE_REQUIREMENT,
    NODE_TEST,
    EdgeType,
    GraphEdge,
    KBConfig,
    KnowledgeStore,
    VectorRecord,
    embed,
)
from .rl_core import RngStreams
from .validators import validate_feedback

logger = logging.getLogger(__name__)

SEVERITY_BANDS: Dict[Severity, Tuple[int, int]] = {
    Severity.Low: (0, 1),
    Severity.Medium: (2, 3),
    Severity.High: (4, 5),
    Severity.Critical: (6, 7),
}
SIGNATURE_VALUE: float = 0.5

# columns: Critical, High, Medium, Low
DEFAULT_AFFINITY: Dict[GenerationStrategy, Tuple[float, float, float, float]] = {
    GenerationStrategy.HappyPath: (0.2, 0.3, 0.5, 0.9),
    GenerationStrategy.Boundary: (0.4, 0.6, 1.0, 0.6),
    GenerationStrategy.Negative: (0.5, 0.9, 0.7, 0.4),
    GenerationStrategy.Integration: (1.0, 0.7, 0.5, 0.3),
    GenerationStrategy.RegressionDerived: (0.5, 0.6, 0.6, 0.6),
}

STRATEGY_STEPS: Dict[GenerationStrategy, int] = {
    GenerationStrategy.HappyPath: 3,
    GenerationStrategy.Boundary: 5,
    GenerationStrategy.Negative: 6,
    GenerationStrategy.Integration: 8,
    GenerationStrategy.RegressionDerived: 4,
}

INTEGRATION_FACTORS: Dict[GenerationStrategy, float] = {
    GenerationStrategy.HappyPath: 1.2,
    GenerationStrategy.Boundary: 1.0,
    GenerationStrategy.Negative: 0.9,
    GenerationStrategy.Integration: 0.8,
    GenerationStrategy.RegressionDerived: 1.1,
}

COMPLIANCE_SCORES: Tuple[float, ...] = (0.4, 0.7, 0.9, 1.0)

_VOCABULARY = (
    "validate", "posting", "invoice", "ledger", "approval", "export", "import", "batch",
    "currency", "tax", "audit", "user", "role", "session", "report", "schedule",
    "payment", "vendor", "order", "stock", "shipment", "refund", "limit", "threshold",
)


@dataclass(frozen=True)
class ExecutionModel:
    detection_sharpness: float = 6.0
    detection_threshold: float = 0.5
    false_positive_rate: float = 0.08
    base_time: float = 10.0
    per_step_time: float = 2.0
    baseline_time: float = 30.0
    noise_scale: float = 0.0

    def __post_init__(self) -> None:
        raise_if(self.detection_sharpness <= 0, _bad("detection_sharpness must be positive", "detection_sharpness"))
        raise_if(
            not (0.0 <= self.false_positive_rate < 1.0),
            _bad("false_positive_rate must lie in [0, 1)", "false_positive_rate"),
        )
        for key in ("base_time", "per_step_time", "baseline_time"):
            raise_if(getattr(self, key) <= 0, _bad(f"{key} must be positive", key))
        raise_if(self.noise_scale < 0, _bad("noise_scale must be non-negative", "noise_scale"))


@dataclass(frozen=True)
class EnvConfig:
    n_requirements: int = 20
    n_defects: int = 40
    d_cov: int = D_COV_DEFAULT
    severity_proportions: Tuple[float, float, float, float] = (0.1, 0.2, 0.4, 0.3)
    tag_pool_size: int = 12
    tags_per_requirement: int = 2
    legacy_tests_per_requirement: int = 1
    n_relations: int = 20
    execution: ExecutionModel = field(default_factory=ExecutionModel)


def _bad(message: str, key: str) -> BadConfig:
    return BadConfig(message, key=f"env.{key}", module="qe_env")


@dataclass(frozen=True)
class DefectSpec:
    id: str
    severity: Severity
    signature: Tuple[float, ...]
    requirement_ref: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "severity": str(self.severity),
            "signature": list(self.signature),
            "requirement_ref": self.requirement_ref,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "DefectSpec":
        return DefectSpec(
            data["id"], Severity.from_name(data["severity"]), tuple(data["signature"]), data["requirement_ref"]
        )


@dataclass(frozen=True)
class Relation:
    source: str
    target: str
    edge_type: EdgeType


@dataclass(frozen=True)
class SyntheticProject:
    requirements: Tuple[Requirement, ...]
    defects: Tuple[DefectSpec, ...]
    affinity: Dict[GenerationStrategy, Tuple[float, float, float, float]]
    legacy_tests: Tuple[TestCase, ...]
    relations: Tuple[Relation, ...]
    seed: int
    d_cov: int = D_COV_DEFAULT

    def requirement(self, requirement_id: str) -> Requirement:
        for requirement in self.requirements:
            if requirement.id == requirement_id:
                return requirement
        logger.error("Unknown requirement '%s'", requirement_id)
        raise UnknownRequirement(
            f"Unknown requirement '{requirement_id}'", key="requirement_refs", module="qe_env"
        )

    def defect(self, defect_id: str) -> DefectSpec:
        return self._defect_index()[defect_id]

    def _defect_index(self) -> Dict[str, DefectSpec]:
        return {d.id: d for d in self.defects}

    def defects_of(self, requirement: Requirement) -> List[DefectSpec]:
        index = self._defect_index()
        return [index[d] for d in requirement.hidden_defect_ids]

    def affinity_of(self, strategy: GenerationStrategy, severity: Severity) -> float:
        return self.affinity[strategy][severity.code]

    def catalog(self) -> ProjectCatalog:
        return ProjectCatalog(self.requirements, self.legacy_tests)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "d_cov": self.d_cov,
            "requirements": [r.to_dict() for r in self.requirements],
            "defects": [d.to_dict() for d in self.defects],
            "affinity": {str(s): list(v) for s, v in self.affinity.items()},
            "legacy_tests": [t.to_dict() for t in self.legacy_tests],
            "relations": [
                {"source": r.source, "target": r.target, "edge_type": str(r.edge_type)}
                for r in self.relations
            ],
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "SyntheticProject":
        affinity_items = data["affinity"].items()
        return SyntheticProject(
            requirements=tuple(Requirement.from_dict(r) for r in data["requirements"]),
            defects=tuple(DefectSpec.from_dict(d) for d in data["defects"]),
            affinity={
                GenerationStrategy.from_name(k): (float(v[0]), float(v[1]), float(v[2]), float(v[3]))
                for k, v in affinity_items
            },
            legacy_tests=tuple(TestCase.from_dict(t) for t in data["legacy_tests"]),
            relations=tuple(
                Relation(r["source"], r["target"], EdgeType.from_name(r["edge_type"]))
                for r in data["relations"]
            ),
            seed=int(data["seed"]),
            d_cov=int(data["d_cov"]),
        )

    def save(self, path: PathLike) -> None:
        write_json_atomic(path, self.to_dict())

    @staticmethod
    def load(path: PathLike) -> "SyntheticProject":
        return SyntheticProject.from_dict(read_json(path, module="qe_env"))


def _severity_quota(n_defects: int, proportions: Sequence[float]) -> List[Severity]:
    """Largest-remainder allocation of n_defects over Critical, High, Medium, Low."""
    raw = [p * n_defects for p in proportions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n_defects - sum(counts)]:
        counts[i] += 1
    return [Severity.from_code(code) for code, count in enumerate(counts) for _ in range(count)]


def defect_signature(footprint: Sequence[int], severity: Severity, d_cov: int) -> Tuple[float, ...]:
    vector = np.zeros(d_cov, dtype=np.float64)
    for position in SEVERITY_BANDS[severity]:
        vector[footprint[position]] = SIGNATURE_VALUE
    return tuple(float(v) for v in vector)


def _validate_env_config(config: EnvConfig) -> None:
    raise_if(config.n_requirements < 1, _bad("n_requirements must be >= 1", "n_requirements"))
    raise_if(config.n_defects < 0, _bad("n_defects must be >= 0", "n_defects"))
    raise_if(config.d_cov < 8, _bad("d_cov must be >= 8", "d_cov"))
    raise_if(
        len(config.severity_proportions) != 4
        or any(p < 0 for p in config.severity_proportions)
        or abs(math.fsum(config.severity_proportions) - 1.0) > 1e-9,
        _bad("severity_proportions must be four non-negative reals summing to 1", "severity_proportions"),
    )
    raise_if(
        not (1 <= config.tags_per_requirement <= config.tag_pool_size),
        _bad("tags_per_requirement must lie in [1, tag_pool_size]", "tags_per_requirement"),
    )
    raise_if(config.n_relations < 0, _bad("n_relations must be >= 0", "n_relations"))
    raise_if(
        config.legacy_tests_per_requirement < 0,
        _bad("legacy_tests_per_requirement must be >= 0", "legacy_tests_per_requirement"),
    )


def generate_project(config: EnvConfig, seed: int) -> SyntheticProject:
    _validate_env_config(config)
    rng = RngStreams(seed).child("project")
    tags = [f"component{i:02d}" for i in range(config.tag_pool_size)]

    drafts: List[Tuple[str, str, frozenset]] = []
    for index in range(config.n_requirements):
        chosen = rng.choice(len(tags), size=config.tags_per_requirement, replace=False)
        req_tags = frozenset(tags[int(i)] for i in chosen)
        words = [_VOCABULARY[int(i)] for i in rng.choice(len(_VOCABULARY), size=4, replace=False)]
        text = f"The system shall {words[0]} {words[1]} for {' and '.join(sorted(req_tags))} with {words[2]} {words[3]}"
        drafts.append((f"req-{index:03d}", text, req_tags))

    severities = _severity_quota(config.n_defects, config.severity_proportions)
    rng.shuffle(severities)  # type: ignore[arg-type]
    owner_order = [drafts[int(i)][0] for i in rng.permutation(config.n_requirements)]
    owned: Dict[str, List[str]] = {d[0]: [] for d in drafts}
    owners: List[str] = []
    for index in range(config.n_defects):
        owner = owner_order[index % config.n_requirements]
        owned[owner].append(f"def-{index:03d}")
        owners.append(owner)

    requirements = tuple(
        Requirement(req_id, text, req_tags, tuple(owned[req_id])) for req_id, text, req_tags in drafts
    )
    by_id = {r.id: r for r in requirements}
    defects = tuple(
        DefectSpec(
            f"def-{index:03d}",
            severities[index],
            defect_signature(coverage_footprint(by_id[owners[index]], config.d_cov), severities[index], config.d_cov),
            owners[index],
        )
        for index in range(config.n_defects)
    )

    legacy: List[TestCase] = []
    for requirement in requirements:
        footprint = coverage_footprint(requirement, config.d_cov)
        coverage = place_on_footprint(
            footprint, STRATEGY_PROFILES[GenerationStrategy.HappyPath], config.d_cov
        )
        for ordinal in range(config.legacy_tests_per_requirement):
            legacy.append(
                TestCase(
                    id=content_id("legacy", {"req": requirement.id, "n": ordinal, "seed": seed}),
                    requirement_refs=(requirement.id,),
                    strategy=GenerationStrategy.HappyPath,
                    retrieval_mode=RetrievalMode.VectorOnly,
                    coverage_vector=tuple(float(c) for c in coverage),
                    generating_agent=AgentRole.LegacyTestAnalysis,
                )
            )

    relations: List[Relation] = []
    seen = set()
    if config.n_requirements > 1:
        for _ in range(config.n_relations):
            source, target = (int(i) for i in rng.choice(config.n_requirements, size=2, replace=False))
            edge_type = EdgeType.Impacts if rng.random() < 0.5 else EdgeType.DependsOn
            key = (source, target, edge_type)
            if key in seen:
                continue
            seen.add(key)
            relations.append(Relation(requirements[source].id, requirements[target].id, edge_type))

    project = SyntheticProject(
        requirements=requirements,
        defects=defects,
        affinity=dict(DEFAULT_AFFINITY),
        legacy_tests=tuple(legacy),
        relations=tuple(relations),
        seed=seed,
        d_cov=config.d_cov,
    )
    logger.info(
        "Generated project seed=%d: %d requirements, %d defects, %d legacy tests, %d relations",
        seed,
        len(requirements),
        len(defects),
        len(legacy),
        len(relations),
    )
    return project


def seed_knowledge_store(project: SyntheticProject, config: Optional[KBConfig] = None) -> KnowledgeStore:
    """Initial knowledge: requirements, legacy tests and requirement relations."""
    store = KnowledgeStore(config)
    d_emb = store.config.d_emb
    for requirement in project.requirements:
        store.add_node(requirement.id, NODE_REQUIREMENT)
        store.add_record(
            VectorRecord(
                requirement.id,
                tuple(embed(requirement.tokens(), d_emb)),
                requirement.id,
                store.config.initial_usefulness,
            )
        )
    for test in project.legacy_tests:
        requirement = project.requirement(test.requirement_refs[0])
        store.add_node(test.id, NODE_TEST, test.coverage_vector)
        store.add_record(
            VectorRecord(
                test.id,
                tuple(embed(requirement_tokens(requirement, "legacy"), d_emb)),
                test.id,
                store.config.initial_usefulness,
            )
        )
        store.add_edge(GraphEdge(requirement.id, test.id, EdgeType.Covers, store.config.covers_weight))
    for relation in project.relations:
        store.add_edge(GraphEdge(relation.source, relation.target, relation.edge_type, 0.5))
    logger.info("Seeded knowledge store with %d records and %d edges", len(store), store.graph.number_of_edges())
    return store


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def detection_probability(
    coverage: Sequence[float],
    signature: Sequence[float],
    affinity: float,
    model: ExecutionModel,
) -> float:
    overlap = float(np.dot(coverage, signature))
    raw = sigmoid(model.detection_sharpness * (overlap - model.detection_threshold)) * affinity
    return min(max(raw, 0.0), 1.0)


def execution_steps(test: TestCase) -> int:
    mass = float(np.sum(test.coverage_vector))
    return (
        STRATEGY_STEPS[test.strategy]
        + test.compliance_checks
        + 2 * (len(test.requirement_refs) - 1)
        + int(round(mass / 2.0))
    )


def execute_test(
    test: TestCase,
    project: SyntheticProject,
    model: ExecutionModel,
    rng: np.random.Generator,
) -> FeedbackRecord:
    """Simulated QE execution of one test. Draw count depends only on the referenced defects."""
    requirements = [project.requirement(ref) for ref in test.requirement_refs]
    coverage = np.asarray(test.coverage_vector, dtype=np.float64)
    raise_if(
        coverage.shape != (project.d_cov,),
        ValidationError(
            f"Test '{test.id}' coverage has {coverage.size} dims, expected {project.d_cov}",
            key="coverage_vector",
            module="qe_env",
        ),
    )

    reports: List[DefectReport] = []
    overlaps: List[float] = []
    footprint_dims: List[int] = []
    for requirement in requirements:
        footprint = coverage_footprint(requirement, project.d_cov)
        footprint_dims.extend(d for d in footprint if d not in footprint_dims)
        best = None
        for defect in project.defects_of(requirement):
            overlap = float(np.dot(coverage, defect.signature))
            best = overlap if best is None else max(best, overlap)
            p = detection_probability(
                coverage, defect.signature, project.affinity_of(test.strategy, defect.severity), model
            )
            if rng.random() < p:
                reports.append(
                    DefectReport(f"{test.id}:{defect.id}", test.id, defect.severity, False, defect.id)
                )
        if best is None:
            best = float(np.mean(coverage[list(footprint)]))
        overlaps.append(min(max(best, 0.0), 1.0))

    true_found = len(reports)
    if rng.random() < model.false_positive_rate:
        severity = Severity.from_code(int(rng.integers(Severity.size())))
        reports.append(DefectReport(f"{test.id}:fp", test.id, severity, True, None))
    noise = rng.normal()
    false_positives = len(reports) - true_found

    execution_time = max(
        model.base_time + model.per_step_time * execution_steps(test) + model.noise_scale * noise,
        1e-3,
    )
    quality = 1.0 if not reports else true_found / (true_found + false_positives)
    functional = float(np.mean([coverage[d] >= model.detection_threshold for d in footprint_dims]))
    record = FeedbackRecord(
        test_case_ref=test.id,
        defects=tuple(reports),
        execution_time=execution_time,
        baseline_time=model.baseline_time,
        quality_rating=quality,
        requirement_coverage_assessment=float(np.mean(overlaps)),
        functional_coverage_validation=functional,
        workflow_integration_factor=INTEGRATION_FACTORS[test.strategy],
        compliance_score=COMPLIANCE_SCORES[min(test.compliance_checks, len(COMPLIANCE_SCORES) - 1)],
    )
    logger.debug(
        "Executed %s: %d true defects, %d false positives, time %.2f",
        test.id,
        true_found,
        false_positives,
        execution_time,
    )
    return record


def reachable_defect_counts(project: SyntheticProject, requirement_refs: Iterable[str]) -> Dict[str, int]:
    """How many seeded defects each referenced requirement holds. Only the counts leave the simulator."""
    return {ref: len(project.requirement(ref).hidden_defect_ids) for ref in requirement_refs}


def write_feedback(path: PathLike, records: Iterable[FeedbackRecord]) -> None:
    write_jsonl(path, (r.to_dict() for r in records))


def replay_feedback(
    path: PathLike,
    catalog: Optional[ProjectCatalog] = None,
    on_error: Optional[Callable[[QerlError], None]] = None,
) -> Iterator[FeedbackRecord]:
    """Yields feedback records in file order.

    Malformed or invalid lines raise, or are handed to `on_error` and skipped when given.
    """
    for number, line in iter_lines(path, module="qe_env"):
        try:
            record = feedback_from_line(line, number)
            if catalog is not None:
                validate_feedback(record, catalog)
        except QerlError as e:
            e.line = number
            if not str(e).startswith(f"line {number}"):
                e.args = (f"line {number}: {e}",)
            logger.error("Rejected feedback line %d of %s: %s", number, path, e)
            if on_error is None:
                raise
            on_error(e)
            continue
        yield record


__all__ = [
    "SEVERITY_BANDS",
    "SIGNATURE_VALUE",
    "DEFAULT_AFFINITY",
    "STRATEGY_STEPS",
    "INTEGRATION_FACTORS",
    "COMPLIANCE_SCORES",
    "ExecutionModel",
    "EnvConfig",
    "DefectSpec",
    "Relation",
    "SyntheticProject",
    "defect_signature",
    "generate_project",
    "seed_knowledge_store",
    "sigmoid",
    "detection_probability",
    "execution_steps",
    "execute_test",
    "reachable_defect_counts",
    "write_feedback",
    "replay_feedback",
]
