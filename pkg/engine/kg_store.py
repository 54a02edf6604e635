"""Directed labelled knowledge graph with mirrored adjacency indexes."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from engine.errors import EmptyGraphError, NotFoundError, ParseError, ValidationError

logger = logging.getLogger(__name__)


class Direction(str, Enum):
    OUT = "out"
    IN = "in"
    BOTH = "both"


class Scope(str, Enum):
    TOPIC = "topic-entity-edges"
    ALL = "all-edges"


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class PerturbationSpec:
    removal_ratio: float
    scope: Scope = Scope.TOPIC
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.removal_ratio <= 1.0:
            raise ValidationError(f"removal ratio must be in [0, 1], got {self.removal_ratio}")
        object.__setattr__(self, "scope", Scope(self.scope))


class KnowledgeGraph:
    """Immutable after construction. Ids are dense integers in first-appearance order."""

    def __init__(self, entity_labels: Iterable[str], relation_labels: Iterable[str],
                 triples: Iterable[Triple]):
        self.entity_labels = tuple(entity_labels)
        self.relation_labels = tuple(relation_labels)
        self._entity_index = {label: i for i, label in enumerate(self.entity_labels)}
        self._relation_index = {label: i for i, label in enumerate(self.relation_labels)}
        self._folded_index = {}
        for i, label in enumerate(self.entity_labels):
            self._folded_index.setdefault(label.casefold(), i)

        unique = sorted(set(triples))
        for t in unique:
            if not (0 <= t.head < len(self.entity_labels) and 0 <= t.tail < len(self.entity_labels)):
                raise ValidationError(f"triple {t} references an unknown entity")
            if not 0 <= t.relation < len(self.relation_labels):
                raise ValidationError(f"triple {t} references an unknown relation")
        self.triples = tuple(unique)

        out_adj = defaultdict(list)
        in_adj = defaultdict(list)
        for t in self.triples:
            out_adj[t.head].append((t.relation, t.tail))
            in_adj[t.tail].append((t.relation, t.head))
        self.out_adjacency = {e: tuple(sorted(v)) for e, v in out_adj.items()}
        self.in_adjacency = {e: tuple(sorted(v)) for e, v in in_adj.items()}

    @classmethod
    def from_labeled(cls, rows: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        entities: dict[str, int] = {}
        relations: dict[str, int] = {}
        triples = []
        for head, relation, tail in rows:
            h = entities.setdefault(head, len(entities))
            r = relations.setdefault(relation, len(relations))
            t = entities.setdefault(tail, len(entities))
            triples.append(Triple(h, r, t))
        return cls(entities, relations, triples)

    @property
    def num_entities(self) -> int:
        return len(self.entity_labels)

    @property
    def num_relations(self) -> int:
        return len(self.relation_labels)

    def has_entity(self, entity: int) -> bool:
        return 0 <= entity < len(self.entity_labels)

    def label(self, entity: int) -> str:
        if not self.has_entity(entity):
            raise NotFoundError(f"unknown entity id {entity}")
        return self.entity_labels[entity]

    def relation_label(self, relation: int) -> str:
        if not 0 <= relation < len(self.relation_labels):
            raise NotFoundError(f"unknown relation id {relation}")
        return self.relation_labels[relation]

    def entity_id(self, label: str) -> int:
        entity = self.find_entity(label)
        if entity is None:
            raise NotFoundError(f"entity not found: {label!r}")
        return entity

    def find_entity(self, label: str) -> int | None:
        """Exact label match first, then case-insensitive."""
        if label in self._entity_index:
            return self._entity_index[label]
        return self._folded_index.get(label.casefold())

    def relation_id(self, label: str) -> int:
        if label not in self._relation_index:
            raise NotFoundError(f"relation not found: {label!r}")
        return self._relation_index[label]

    def out_degree(self, entity: int) -> int:
        return len(self.out_adjacency.get(entity, ()))

    def in_degree(self, entity: int) -> int:
        return len(self.in_adjacency.get(entity, ()))

    def serialize(self) -> str:
        return "".join(
            f"{self.entity_labels[t.head]}\t{self.relation_labels[t.relation]}\t{self.entity_labels[t.tail]}\n"
            for t in self.triples
        )

    def stats(self) -> dict:
        return {
            "entities": self.num_entities,
            "relations": self.num_relations,
            "triples": len(self.triples),
        }

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entity_labels == other.entity_labels
                and self.relation_labels == other.relation_labels
                and self.triples == other.triples)

    def __hash__(self):
        return hash((self.entity_labels, self.relation_labels, self.triples))


def parse_triple_lines(lines: Iterable[str]) -> list[tuple[str, str, str]]:
    rows = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(fields)}", line_no)
        fields = [f.strip() for f in fields]
        if not all(fields):
            raise ParseError("empty field", line_no)
        rows.append((fields[0], fields[1], fields[2]))
    return rows


def ingest(source: str | Path) -> KnowledgeGraph:
    with open(source, encoding="utf-8") as fh:
        rows = parse_triple_lines(fh)
    if not rows:
        raise EmptyGraphError(f"{source}: no triples")
    graph = KnowledgeGraph.from_labeled(rows)
    logger.info("ingested %s: %d entities, %d relations, %d triples",
                source, graph.num_entities, graph.num_relations, len(graph.triples))
    return graph


def write_triples(path: str | Path, rows: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for head, relation, tail in rows:
            fh.write(f"{head}\t{relation}\t{tail}\n")


def neighbors(graph: KnowledgeGraph, entity: int,
              direction: Direction | str = Direction.BOTH) -> list[tuple[int, int, Direction]]:
    """Adjacency entries as (relation, neighbour, direction), sorted by relation then neighbour."""
    if not graph.has_entity(entity):
        raise NotFoundError(f"unknown entity id {entity}")
    direction = Direction(direction)
    entries = []
    if direction in (Direction.OUT, Direction.BOTH):
        entries += [(r, n, Direction.OUT) for r, n in graph.out_adjacency.get(entity, ())]
    if direction in (Direction.IN, Direction.BOTH):
        entries += [(r, n, Direction.IN) for r, n in graph.in_adjacency.get(entity, ())]
    if direction is Direction.BOTH:
        entries.sort(key=lambda e: (e[0], e[1], e[2] is Direction.IN))
    return entries


def removal_candidates(graph: KnowledgeGraph, spec: PerturbationSpec,
                       topic_entities: Iterable[int] = ()) -> list[Triple]:
    topics = set(topic_entities)
    if spec.scope is Scope.ALL:
        return list(graph.triples)
    if not topics:
        raise ValidationError("topic-entity-edges scope needs at least one topic entity")
    for e in topics:
        if not graph.has_entity(e):
            raise NotFoundError(f"unknown topic entity id {e}")
    return [t for t in graph.triples if t.head in topics or t.tail in topics]


def removed_edges(graph: KnowledgeGraph, spec: PerturbationSpec,
                  topic_entities: Iterable[int] = ()) -> set[Triple]:
    # a permutation prefix keeps removal sets nested across ratios for one seed
    candidates = removal_candidates(graph, spec, topic_entities)
    count = math.floor(spec.removal_ratio * len(candidates) + 1e-9)
    order = np.random.default_rng(spec.seed).permutation(len(candidates))
    return {candidates[i] for i in order[:count]}


def perturb(graph: KnowledgeGraph, spec: PerturbationSpec,
            topic_entities: Iterable[int] = ()) -> KnowledgeGraph:
    removed = removed_edges(graph, spec, topic_entities)
    logger.debug("perturb ratio=%s scope=%s seed=%s removed %d edges",
                 spec.removal_ratio, spec.scope.value, spec.seed, len(removed))
    return KnowledgeGraph(graph.entity_labels, graph.relation_labels,
                          (t for t in graph.triples if t not in removed))
