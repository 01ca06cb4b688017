import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import networkx as nx  # type: ignore[import-untyped]
import numpy as np

from .domain import FeedbackRecord, RetrievalMode, TestCase, stable_digest
from .errors import (
    DimensionMismatch,
    EmptyInput,
    ParseError,
    RangeViolation,
    SchemaVersionMismatch,
    UnknownNode,
    raise_if,
)
from .files import PathLike, read_json, write_json_atomic
from .structures import CodedEnum, Interval, UNIT

logger = logging.getLogger(__name__)

SNAPSHOT_SCHEMA_VERSION: int = 1
THRESHOLD_STEP: float = 0.02
TOP_K_STEP: int = 1
EDGE_WEIGHT_STEP: float = 0.05
TOP_K_RANGE = Interval(1, 64)
DEPTH_RANGE = Interval(0, 4)

NODE_REQUIREMENT = "requirement"
NODE_TEST = "test"


class EdgeType(CodedEnum):
    Covers = 0
    Impacts = 1
    DependsOn = 2
    DetectedBy = 3


class KBAction(CodedEnum):
    RaiseThreshold = 0
    LowerThreshold = 1
    IncreaseTopK = 2
    DecreaseTopK = 3
    BoostCovers = 4
    BoostImpacts = 5
    BoostDependsOn = 6
    BoostDetectedBy = 7
    DecayCovers = 8
    DecayImpacts = 9
    DecayDependsOn = 10
    DecayDetectedBy = 11
    NoOp = 12

    @property
    def edge_type(self) -> Optional[EdgeType]:
        for prefix in ("Boost", "Decay"):
            if self.name.startswith(prefix):
                return EdgeType.from_name(self.name[len(prefix) :])
        return None


def _store_error(message: str, key: str) -> RangeViolation:
    return RangeViolation(message, key=key, module="knowledge_store")


@dataclass(frozen=True)
class VectorRecord:
    id: str
    embedding: Tuple[float, ...]
    payload_ref: str
    usefulness: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        norm = math.sqrt(math.fsum(x * x for x in self.embedding))
        raise_if(
            abs(norm - 1.0) > 1e-6,
            _store_error(f"Record '{self.id}' embedding norm is {norm}, expected 1", "embedding"),
        )
        raise_if(
            not UNIT.contains(self.usefulness),
            _store_error(f"Record '{self.id}' usefulness outside [0, 1]", "usefulness"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "embedding": list(self.embedding),
            "payload_ref": self.payload_ref,
            "usefulness": self.usefulness,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "VectorRecord":
        return VectorRecord(
            data["id"], tuple(data["embedding"]), data["payload_ref"], float(data["usefulness"])
        )


@dataclass(frozen=True)
class GraphEdge:
    source: str
    target: str
    edge_type: EdgeType
    weight: float

    def __post_init__(self) -> None:
        raise_if(
            self.source == self.target,
            _store_error(f"Self-loop on '{self.source}' is not allowed", "source"),
        )
        raise_if(
            not UNIT.contains(self.weight),
            _store_error(f"Edge weight {self.weight} outside [0, 1]", "weight"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source": self.source,
            "target": self.target,
            "edge_type": str(self.edge_type),
            "weight": self.weight,
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "GraphEdge":
        return GraphEdge(
            data["source"], data["target"], EdgeType.from_name(data["edge_type"]), float(data["weight"])
        )


def default_edge_type_weights() -> Dict[EdgeType, float]:
    return {
        EdgeType.Covers: 0.9,
        EdgeType.Impacts: 0.7,
        EdgeType.DependsOn: 0.6,
        EdgeType.DetectedBy: 0.8,
    }


@dataclass(frozen=True)
class RetrievalParams:
    similarity_threshold: float = 0.3
    top_k: int = 8
    traversal_depth: int = 2
    edge_type_weights: Dict[EdgeType, float] = field(default_factory=default_edge_type_weights)

    def __post_init__(self) -> None:
        raise_if(
            not UNIT.contains(self.similarity_threshold),
            _store_error("similarity_threshold outside [0, 1]", "similarity_threshold"),
        )
        raise_if(
            not isinstance(self.top_k, int) or not TOP_K_RANGE.contains(self.top_k),
            _store_error(f"top_k must be an integer in {TOP_K_RANGE}", "top_k"),
        )
        raise_if(
            not isinstance(self.traversal_depth, int)
            or not DEPTH_RANGE.contains(self.traversal_depth),
            _store_error(f"traversal_depth must be an integer in {DEPTH_RANGE}", "traversal_depth"),
        )
        raise_if(
            set(self.edge_type_weights) != set(EdgeType),
            _store_error("edge_type_weights must cover every edge type", "edge_type_weights"),
        )
        for edge_type, weight in self.edge_type_weights.items():
            raise_if(
                not UNIT.contains(weight),
                _store_error(
                    f"edge_type_weights[{edge_type}] outside [0, 1]", "edge_type_weights"
                ),
            )

    def type_weight(self, edge_type: EdgeType) -> float:
        return self.edge_type_weights[edge_type]

    def mean_type_weight(self) -> float:
        return math.fsum(self.edge_type_weights.values()) / len(self.edge_type_weights)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "similarity_threshold": self.similarity_threshold,
            "top_k": self.top_k,
            "traversal_depth": self.traversal_depth,
            "edge_type_weights": {str(k): v for k, v in sorted(self.edge_type_weights.items(), key=lambda kv: kv[0].code)},
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "RetrievalParams":
        weights = default_edge_type_weights()
        for name, value in data.get("edge_type_weights", {}).items():
            weights[EdgeType.from_name(name)] = float(value)
        defaults = RetrievalParams()
        return RetrievalParams(
            similarity_threshold=float(data.get("similarity_threshold", defaults.similarity_threshold)),
            top_k=int(data.get("top_k", defaults.top_k)),
            traversal_depth=int(data.get("traversal_depth", defaults.traversal_depth)),
            edge_type_weights=weights,
        )


@dataclass(frozen=True)
class ContextItem:
    node_id: str
    score: float


@dataclass(frozen=True)
class KBConfig:
    d_emb: int = 256
    edge_learning_rate: float = 0.1
    initial_usefulness: float = 0.5
    covers_weight: float = 0.5
    max_tests_per_requirement: int = 8
    params: RetrievalParams = field(default_factory=RetrievalParams)


def embed(text_tokens: Sequence[str], d_emb: int = 256) -> np.ndarray:
    """Signed feature hashing of unigrams and bigrams, L2-normalized."""
    raise_if(
        d_emb < 8, RangeViolation(f"d_emb must be >= 8, got {d_emb}", key="d_emb", module="knowledge_store")
    )
    tokens = list(text_tokens)
    raise_if(
        len(tokens) == 0,
        EmptyInput("embed needs at least one token", key="text_tokens", module="knowledge_store"),
    )
    features = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    vector = np.zeros(d_emb, dtype=np.float64)
    for feature in features:
        digest = stable_digest(feature)
        vector[digest % d_emb] += -1.0 if digest >> 63 else 1.0
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        # every bucket cancelled out
        vector[stable_digest(features[0]) % d_emb] = 1.0
        return vector
    return vector / norm


def apply_kb_action(action: KBAction, params: RetrievalParams) -> RetrievalParams:
    """Moves exactly one knob by its fixed step and clamps it. NoOp returns params unchanged."""
    logger.debug("Applying KB action %s", action)
    if action is KBAction.NoOp:
        return params
    if action in (KBAction.RaiseThreshold, KBAction.LowerThreshold):
        step = THRESHOLD_STEP if action is KBAction.RaiseThreshold else -THRESHOLD_STEP
        value = round(UNIT.clamp(params.similarity_threshold + step), 10)
        return replace(params, similarity_threshold=value)
    if action in (KBAction.IncreaseTopK, KBAction.DecreaseTopK):
        step_k = TOP_K_STEP if action is KBAction.IncreaseTopK else -TOP_K_STEP
        return replace(params, top_k=int(TOP_K_RANGE.clamp(params.top_k + step_k)))
    edge_type = action.edge_type
    assert edge_type is not None
    step = EDGE_WEIGHT_STEP if action.name.startswith("Boost") else -EDGE_WEIGHT_STEP
    weights = dict(params.edge_type_weights)
    weights[edge_type] = round(UNIT.clamp(weights[edge_type] + step), 10)
    return replace(params, edge_type_weights=weights)


class KnowledgeStore:
    """Hybrid vector-graph knowledge base.

    Vector records are scanned exhaustively. The relationship graph is a MultiDiGraph
    keyed by edge type name, so (source, target, edge_type) is unique. Mutations are not
    synchronized; callers hold exclusive access while mutating.
    """

    def __init__(self, config: Optional[KBConfig] = None) -> None:
        self.config = config or KBConfig()
        self.params: RetrievalParams = self.config.params
        self.graph = nx.MultiDiGraph()
        self._records: Dict[str, VectorRecord] = {}
        self._row_of: Dict[str, int] = {}
        self._row_ids: List[str] = []
        self._matrix = np.zeros((16, self.config.d_emb), dtype=np.float64)

    # nodes and records

    def add_node(self, node_id: str, kind: str, coverage: Optional[Sequence[float]] = None) -> None:
        attributes: Dict[str, Any] = {"kind": kind}
        if coverage is not None:
            attributes["coverage"] = tuple(float(c) for c in coverage)
        self.graph.add_node(node_id, **attributes)

    def has_node(self, node_id: str) -> bool:
        return bool(self.graph.has_node(node_id))

    def node_kind(self, node_id: str) -> str:
        return str(self.graph.nodes[node_id]["kind"])

    def node_coverage(self, node_id: str) -> Optional[Tuple[float, ...]]:
        return self.graph.nodes[node_id].get("coverage")

    def nodes(self) -> List[str]:
        return sorted(self.graph.nodes)

    def add_record(self, record: VectorRecord) -> None:
        raise_if(
            len(record.embedding) != self.config.d_emb,
            DimensionMismatch(
                f"Record '{record.id}' has dimension {len(record.embedding)}, "
                f"expected {self.config.d_emb}",
                key="embedding",
                module="knowledge_store",
            ),
        )
        if record.id in self._row_of:
            row = self._row_of[record.id]
        else:
            row = len(self._row_ids)
            if row == self._matrix.shape[0]:
                grown = np.zeros((2 * row, self.config.d_emb), dtype=np.float64)
                grown[:row] = self._matrix
                self._matrix = grown
            self._row_ids.append(record.id)
            self._row_of[record.id] = row
        self._matrix[row] = record.embedding
        self._records[record.id] = record

    def record(self, record_id: str) -> VectorRecord:
        return self._records[record_id]

    def has_record(self, record_id: str) -> bool:
        return record_id in self._records

    def linked_tests(self, requirement_id: str) -> List[str]:
        """Test nodes the requirement Covers, sorted by id."""
        if not self.graph.has_node(requirement_id):
            return []
        return sorted(
            {t for _, t, k in self.graph.out_edges(requirement_id, keys=True) if k == EdgeType.Covers.name}
        )

    def records(self) -> List[VectorRecord]:
        return [self._records[i] for i in sorted(self._records)]

    def __len__(self) -> int:
        return len(self._records)

    def remove_node(self, node_id: str) -> None:
        """Drops a node, its edges and any vector records whose payload is the node."""
        if self.graph.has_node(node_id):
            self.graph.remove_node(node_id)
        doomed = [rid for rid, r in self._records.items() if r.payload_ref == node_id]
        for record_id in doomed:
            del self._records[record_id]
        if doomed:
            self._rebuild_matrix()

    def _rebuild_matrix(self) -> None:
        self._row_ids = sorted(self._records)
        self._row_of = {rid: row for row, rid in enumerate(self._row_ids)}
        self._matrix = np.zeros((max(16, 2 * len(self._row_ids)), self.config.d_emb), dtype=np.float64)
        for row, rid in enumerate(self._row_ids):
            self._matrix[row] = self._records[rid].embedding

    # edges

    def add_edge(self, edge: GraphEdge) -> None:
        for node_id in (edge.source, edge.target):
            if not self.graph.has_node(node_id):
                raise UnknownNode(f"Unknown node '{node_id}'", key="node", module="knowledge_store")
        self.graph.add_edge(edge.source, edge.target, key=edge.edge_type.name, weight=edge.weight)

    def edge(self, source: str, target: str, edge_type: EdgeType) -> GraphEdge:
        data = self.graph.get_edge_data(source, target, key=edge_type.name)
        if data is None:
            raise UnknownNode(
                f"No {edge_type} edge {source} -> {target}", key="edge", module="knowledge_store"
            )
        return GraphEdge(source, target, edge_type, float(data["weight"]))

    def edges(self) -> List[GraphEdge]:
        edges = [
            GraphEdge(u, v, EdgeType.from_name(k), float(d["weight"]))
            for u, v, k, d in self.graph.edges(keys=True, data=True)
        ]
        return sorted(edges, key=lambda e: (e.source, e.target, e.edge_type.code))

    def mean_edge_weight(self) -> float:
        weights = [float(d["weight"]) for _, _, d in self.graph.edges(data=True)]
        return math.fsum(weights) / len(weights) if weights else 0.0

    # retrieval

    def vector_query(
        self, query: np.ndarray, params: Optional[RetrievalParams] = None
    ) -> List[Tuple[VectorRecord, float]]:
        params = params or self.params
        q = np.asarray(query, dtype=np.float64)
        raise_if(
            q.shape != (self.config.d_emb,),
            DimensionMismatch(
                f"Query shape {q.shape}, expected ({self.config.d_emb},)",
                key="query",
                module="knowledge_store",
            ),
        )
        n = len(self._row_ids)
        if n == 0:
            logger.debug("vector_query on an empty store")
            return []
        # row-wise reduction keeps each score independent of the row's position
        similarities = np.clip((self._matrix[:n] * q).sum(axis=1), -1.0, 1.0)
        hits = [
            (self._row_ids[row], float(similarities[row]))
            for row in np.nonzero(similarities >= params.similarity_threshold)[0]
        ]
        hits.sort(key=lambda hit: (-hit[1], hit[0]))
        return [(self._records[rid], sim) for rid, sim in hits[: params.top_k]]

    def graph_traverse(
        self, seed_nodes: Iterable[str], params: Optional[RetrievalParams] = None
    ) -> List[Tuple[str, float]]:
        """Max-product path scores up to traversal_depth hops from the seeds."""
        params = params or self.params
        best: Dict[str, float] = {}
        for seed in seed_nodes:
            if not self.graph.has_node(seed):
                logger.error("graph_traverse seed '%s' is not in the graph", seed)
                raise UnknownNode(f"Unknown node '{seed}'", key="seed_nodes", module="knowledge_store")
            best[seed] = 1.0
        frontier = dict(best)
        for _ in range(params.traversal_depth):
            improved: Dict[str, float] = {}
            for node, score in frontier.items():
                for _, target, key, data in self.graph.out_edges(node, keys=True, data=True):
                    candidate = score * float(data["weight"]) * params.type_weight(EdgeType[key])
                    if candidate > best.get(target, -1.0):
                        best[target] = candidate
                        improved[target] = candidate
            if not improved:
                break
            frontier = improved
        return sorted(best.items(), key=lambda item: (-item[1], item[0]))

    def hybrid_retrieve(
        self,
        query: np.ndarray,
        seeds: Iterable[str],
        mode: RetrievalMode,
        params: Optional[RetrievalParams] = None,
    ) -> List[ContextItem]:
        params = params or self.params
        if mode is RetrievalMode.VectorOnly:
            return [ContextItem(r.payload_ref, s) for r, s in self.vector_query(query, params)]
        if mode is RetrievalMode.GraphOnly:
            return [ContextItem(n, s) for n, s in self.graph_traverse(seeds, params)]
        combined: Dict[str, float] = {}
        for record, similarity in self.vector_query(query, params):
            combined[record.payload_ref] = combined.get(record.payload_ref, 0.0) + 0.5 * similarity
        for node, path_score in self.graph_traverse(seeds, params):
            combined[node] = combined.get(node, 0.0) + 0.5 * path_score
        ranked = sorted(combined.items(), key=lambda item: (-item[1], item[0]))
        return [ContextItem(n, s) for n, s in ranked[: params.top_k]]

    def retrieval_hit_rate(self, items: Sequence[ContextItem], footprint: Sequence[int]) -> float:
        """Fraction of retrieved items that are test nodes with mean coverage >= 0.5 on footprint."""
        if not items or not footprint:
            return 0.0
        hits = 0
        for item in items:
            if not self.graph.has_node(item.node_id):
                continue
            coverage = self.node_coverage(item.node_id)
            if coverage is not None and np.mean([coverage[d] for d in footprint]) >= 0.5:
                hits += 1
        return hits / len(items)

    # evolution

    def apply_action(self, action: KBAction) -> RetrievalParams:
        self.params = apply_kb_action(action, self.params)
        return self.params

    def reinforce_edges(
        self, feedback: FeedbackRecord, contributing_context: Iterable[str], learning_rate: float
    ) -> int:
        """EMA of contributing edge weights toward 1 (true defect) or 0 (only false positives)."""
        raise_if(
            not Interval(0.0, 1.0, low_closed=False).contains(learning_rate),
            RangeViolation(
                f"learning rate {learning_rate} outside (0, 1]", key="learning_rate", module="knowledge_store"
            ),
        )
        if feedback.true_defects:
            target = 1.0
        elif feedback.false_positives:
            target = 0.0
        else:
            return 0
        context: Set[str] = {n for n in contributing_context if self.graph.has_node(n)}
        touched = 0
        for source, dest, key, data in self.graph.edges(keys=True, data=True):
            if source in context and dest in context:
                weight = float(data["weight"])
                data["weight"] = UNIT.clamp(weight + learning_rate * (target - weight))
                touched += 1
        for record_id, record in list(self._records.items()):
            if record.payload_ref in context:
                usefulness = UNIT.clamp(record.usefulness + learning_rate * (target - record.usefulness))
                self._records[record_id] = replace(record, usefulness=usefulness)
        logger.debug(
            "Reinforced %d edges toward %.0f for test '%s'", touched, target, feedback.test_case_ref
        )
        return touched

    def ingest_test_case(
        self,
        test: TestCase,
        feedback: FeedbackRecord,
        tokens: Sequence[str],
        detected_by_weight: float,
    ) -> bool:
        """Adds a defect-finding test as knowledge linked to its requirements."""
        if not feedback.true_defects or self.graph.has_node(test.id):
            return False
        self.add_node(test.id, NODE_TEST, test.coverage_vector)
        self.add_record(
            VectorRecord(
                test.id,
                tuple(embed(tokens, self.config.d_emb)),
                test.id,
                self.config.initial_usefulness,
            )
        )
        weight = UNIT.clamp(detected_by_weight)
        for requirement_id in test.requirement_refs:
            if not self.graph.has_node(requirement_id):
                continue
            self.add_edge(GraphEdge(requirement_id, test.id, EdgeType.Covers, self.config.covers_weight))
            self.add_edge(GraphEdge(requirement_id, test.id, EdgeType.DetectedBy, weight))
            self._evict_excess_tests(requirement_id)
        logger.debug("Ingested test '%s' into the knowledge store", test.id)
        return True

    def _evict_excess_tests(self, requirement_id: str) -> None:
        tests = self.linked_tests(requirement_id)
        excess = len(tests) - self.config.max_tests_per_requirement
        if excess <= 0:
            return
        ranked = sorted(tests, key=lambda t: (self._records[t].usefulness if t in self._records else 0.0, t))
        for node_id in ranked[:excess]:
            logger.debug("Evicting test '%s' from requirement '%s'", node_id, requirement_id)
            self.remove_node(node_id)

    # snapshot

    def to_dict(self) -> Dict[str, Any]:
        nodes = []
        for node_id in self.nodes():
            entry: Dict[str, Any] = {"id": node_id, "kind": self.node_kind(node_id)}
            coverage = self.node_coverage(node_id)
            if coverage is not None:
                entry["coverage"] = list(coverage)
            nodes.append(entry)
        return {
            "schema_version": SNAPSHOT_SCHEMA_VERSION,
            "vector_records": [r.to_dict() for r in self.records()],
            "graph_nodes": nodes,
            "graph_edges": [e.to_dict() for e in self.edges()],
            "retrieval_params": self.params.to_dict(),
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any], config: Optional[KBConfig] = None) -> "KnowledgeStore":
        version = data.get("schema_version") if isinstance(data, Mapping) else None
        if version != SNAPSHOT_SCHEMA_VERSION:
            logger.error("Knowledge snapshot schema_version %r unsupported", version)
            raise SchemaVersionMismatch(
                f"Knowledge snapshot schema_version {version!r}, expected {SNAPSHOT_SCHEMA_VERSION}",
                module="knowledge_store",
            )
        try:
            store = KnowledgeStore(config)
            for node in data["graph_nodes"]:
                store.add_node(node["id"], node["kind"], node.get("coverage"))
            for record in data["vector_records"]:
                store.add_record(VectorRecord.from_dict(record))
            for edge in data["graph_edges"]:
                store.add_edge(GraphEdge.from_dict(edge))
            store.params = RetrievalParams.from_dict(data["retrieval_params"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Malformed knowledge snapshot: {e!r}", module="knowledge_store") from e
        return store

    def save(self, path: PathLike) -> None:
        logger.info("Saving knowledge snapshot (%d records, %d edges) to %s", len(self), self.graph.number_of_edges(), path)
        write_json_atomic(path, self.to_dict())

    @staticmethod
    def load(path: PathLike, config: Optional[KBConfig] = None) -> "KnowledgeStore":
        return KnowledgeStore.from_dict(read_json(path, module="knowledge_store"), config)


__all__ = [
    "SNAPSHOT_SCHEMA_VERSION",
    "THRESHOLD_STEP",
    "TOP_K_STEP",
    "EDGE_WEIGHT_STEP",
    "NODE_REQUIREMENT",
    "NODE_TEST",
    "EdgeType",
    "KBAction",
    "VectorRecord",
    "GraphEdge",
    "RetrievalParams",
    "ContextItem",
    "KBConfig",
    "embed",
    "apply_kb_action",
    "KnowledgeStore",
]
