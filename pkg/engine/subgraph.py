"""Question-relevant l-hop subgraph extraction by relevance-filtered expansion."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

from engine.embedder import EmbeddingProvider, relevance, top_k
from engine.errors import NotFoundError, ValidationError
from engine.kg_store import Direction, KnowledgeGraph, Triple, neighbors

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractionConfig:
    hops: int = 2
    k1: int = 20
    k2: int = 10
    direction: Direction = Direction.BOTH

    def __post_init__(self):
        if self.hops < 1:
            raise ValidationError(f"hops must be at least 1, got {self.hops}")
        if self.k1 < 1 or self.k2 < 1:
            raise ValidationError(f"k1 and k2 must be at least 1, got {self.k1}, {self.k2}")
        direction = Direction(self.direction)
        if direction is Direction.IN:
            raise ValidationError("extraction direction must be 'out' or 'both'")
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True)
class SubgraphNode:
    entity: int
    label: str
    hop: int
    score: float


@dataclass(frozen=True)
class SubgraphEdge:
    head: int
    relation: int
    tail: int
    relation_label: str


@dataclass(frozen=True)
class Subgraph:
    """Nodes are indexed by position; edges reference node indexes."""
    root: int
    nodes: tuple[SubgraphNode, ...]
    edges: tuple[SubgraphEdge, ...]
    hops: int
    isolated: bool = False
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n.entity: i for i, n in enumerate(self.nodes)})
        if self.root not in self._index:
            raise ValidationError("subgraph root must be one of its nodes")
        for edge in self.edges:
            if not (0 <= edge.head < len(self.nodes) and 0 <= edge.tail < len(self.nodes)):
                raise ValidationError(f"edge {edge} points outside the node list")

    def __len__(self):
        return len(self.nodes)

    @property
    def entity_ids(self) -> list[int]:
        return [n.entity for n in self.nodes]

    @property
    def labels(self) -> list[str]:
        return [n.label for n in self.nodes]

    def contains(self, entity: int) -> bool:
        return entity in self._index

    def index_of(self, entity: int) -> int:
        if entity not in self._index:
            raise NotFoundError(f"entity {entity} is not in the subgraph")
        return self._index[entity]

    def incident_edges(self, index: int) -> list[SubgraphEdge]:
        return [e for e in self.edges if e.head == index or e.tail == index]

    def reorder(self, order: list[int]) -> "Subgraph":
        """Node i of the result is node order[i] of this subgraph."""
        position = {old: new for new, old in enumerate(order)}
        edges = sorted(
            (SubgraphEdge(position[e.head], e.relation, position[e.tail], e.relation_label) for e in self.edges),
            key=lambda e: (e.head, e.relation, e.tail),
        )
        return Subgraph(self.root, tuple(self.nodes[i] for i in order), tuple(edges),
                        self.hops, self.isolated)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "root_label": self.nodes[self._index[self.root]].label,
            "hops": self.hops,
            "isolated": self.isolated,
            "nodes": [
                {"index": i, "entity": n.entity, "label": n.label, "hop": n.hop, "score": round(n.score, 6)}
                for i, n in enumerate(self.nodes)
            ],
            "edges": [
                {"head": e.head, "head_label": self.nodes[e.head].label, "relation": e.relation_label,
                 "tail": e.tail, "tail_label": self.nodes[e.tail].label}
                for e in self.edges
            ],
        }


def induced_edges(graph: KnowledgeGraph, node_set: Iterable[int]) -> list[Triple]:
    nodes = set(node_set)
    return [
        Triple(head, relation, tail)
        for head in sorted(nodes)
        for relation, tail in graph.out_adjacency.get(head, ())
        if tail in nodes
    ]


def extract(graph: KnowledgeGraph, provider: EmbeddingProvider, question: str, topic: int,
            cfg: ExtractionConfig | None = None) -> Subgraph:
    cfg = cfg or ExtractionConfig()
    if not graph.has_entity(topic):
        raise NotFoundError(f"topic entity {topic} not in graph")

    q = provider.embed(question)
    kept = {topic: SubgraphNode(topic, graph.label(topic), 0,
                                relevance(q, provider.embed(graph.label(topic))).value)}
    frontier = [topic]
    for hop in range(1, cfg.hops + 1):
        pool = sorted({
            n for e in frontier for _, n, _ in neighbors(graph, e, cfg.direction)
            if n not in kept
        })
        if not pool:
            break
        width = cfg.k1 if hop == 1 else cfg.k2
        ranked = top_k(q, [(e, provider.embed(graph.label(e))) for e in pool], width)
        for entity, score in ranked:
            kept[entity] = SubgraphNode(entity, graph.label(entity), hop, score)
        frontier = [entity for entity, _ in ranked]

    isolated = len(kept) == 1
    if isolated:
        logger.warning("topic %r has no neighbours; returning a single-node subgraph", graph.label(topic))

    nodes = tuple(kept.values())
    index = {n.entity: i for i, n in enumerate(nodes)}
    edges = tuple(
        SubgraphEdge(index[t.head], t.relation, index[t.tail], graph.relation_label(t.relation))
        for t in induced_edges(graph, index)
    )
    return Subgraph(topic, nodes, edges, cfg.hops, isolated)
