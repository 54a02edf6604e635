"""Stage one: pick question-relevant entities from the soft prompt, and train for it."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from engine.embedder import EmbeddingProvider
from engine.errors import NotFoundError, ParseError, TrainingError, UnlabelableError, ValidationError
from engine.gat import EncoderConfig, MessageGraph, build_message_graph, encode_on_tape, init_encoder_params
from engine.kg_store import KnowledgeGraph
from engine.subgraph import ExtractionConfig, Subgraph, extract
from engine.tensor import (OptimizerConfig, ParameterStore, Tape, Var, add, add_row, as_matrix, gather_rows,
                           glorot, log_softmax_rows, matmul, mul, optimizer_step, reduce_sum, scale, transpose)

logger = logging.getLogger(__name__)

INSTRUCTION = (
    "You are given a question, a list of candidate entities from a knowledge graph and a graph "
    "soft prompt encoding their neighbourhood. Select the entities most relevant for answering the question."
)
DEFAULT_TOP_M = 3


@dataclass(frozen=True)
class DatasetRecord:
    question: str
    topic_entity: str
    answers: tuple[str, ...]
    id: str = ""
    depth: int | None = None

    @classmethod
    def from_dict(cls, payload: dict, fallback_id: str = "") -> "DatasetRecord":
        answers = payload.get("answers")
        if not payload.get("question") or not payload.get("topic_entity") or not answers:
            raise ValidationError("record needs question, topic_entity and answers")
        return cls(payload["question"], payload["topic_entity"], tuple(answers),
                   str(payload.get("id", fallback_id)), payload.get("depth"))

    def to_dict(self) -> dict:
        payload = {"id": self.id, "question": self.question, "topic_entity": self.topic_entity,
                   "answers": list(self.answers)}
        if self.depth is not None:
            payload["depth"] = self.depth
        return payload


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_dict(json.loads(line), fallback_id=f"q{line_no}"))
            except (ValueError, ValidationError) as exc:
                raise ParseError(str(exc), line_no)
    return records


def write_dataset(path: str | Path, records: Iterable[DatasetRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class SelectionLabel:
    entities: frozenset[int]


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    question: str
    candidates: tuple[tuple[int, str], ...]
    soft_prompt: np.ndarray
    entity_row_index: dict[int, int]
    subgraph: Subgraph
    question_vector: np.ndarray

    def to_payload(self) -> dict:
        return {
            "instruction": self.instruction,
            "question": self.question,
            "candidates": [label for _, label in self.candidates],
            "soft_prompt": [self.soft_prompt[self.entity_row_index[e]].tolist() for e, _ in self.candidates],
        }


@dataclass(frozen=True)
class SelectionResult:
    ranked: tuple[tuple[int, float], ...]
    selected: tuple[int, ...]
    relations: dict[int, tuple[tuple[str, str, str], ...]] = field(default_factory=dict)

    def to_dict(self, subgraph: Subgraph) -> dict:
        label = {n.entity: n.label for n in subgraph.nodes}
        return {
            "ranked": [{"entity": label[e], "probability": round(p, 6)} for e, p in self.ranked],
            "selected": [label[e] for e in self.selected],
            "relations": {label[e]: [list(r) for r in rels] for e, rels in self.relations.items()},
        }


def candidate_indexes(subgraph: Subgraph) -> list[int]:
    """Every node but the root; a lone root is its own candidate."""
    if len(subgraph) == 1:
        return [0]
    return [i for i, node in enumerate(subgraph.nodes) if node.entity != subgraph.root]


def build_bundle(subgraph: Subgraph, question: str, soft_prompt: np.ndarray,
                 provider: EmbeddingProvider) -> PromptBundle:
    if soft_prompt.shape[0] != len(subgraph):
        raise ValidationError(f"soft prompt has {soft_prompt.shape[0]} rows for {len(subgraph)} nodes")
    indexes = candidate_indexes(subgraph)
    return PromptBundle(
        instruction=INSTRUCTION,
        question=question,
        candidates=tuple((subgraph.nodes[i].entity, subgraph.nodes[i].label) for i in indexes),
        soft_prompt=soft_prompt,
        entity_row_index={subgraph.nodes[i].entity: i for i in indexes},
        subgraph=subgraph,
        question_vector=provider.embed(question),
    )


def init_head_params(store: ParameterStore, cfg: EncoderConfig, seed: int = 0) -> ParameterStore:
    rng = np.random.default_rng([seed, 1])
    store.add("head.wq", glorot(rng, cfg.d_in, cfg.d_prompt))
    store.add("head.w", np.zeros((cfg.d_prompt, 1)))
    store.add("head.b", np.zeros((1, 1)))
    return store


def init_model_params(cfg: EncoderConfig, seed: int = 0) -> ParameterStore:
    return init_head_params(init_encoder_params(cfg, seed), cfg, seed)


def head_logits(tape: Tape, rows: Var, q: np.ndarray) -> Var:
    """logit_i = row_i . (Wq^T q) + row_i . w + b, a bilinear form over (row || q)."""
    direction = add(transpose(matmul(tape.constant(as_matrix(q)), tape.param("head.wq"))),
                    tape.param("head.w"))
    return add_row(matmul(rows, direction), tape.param("head.b"))


def candidate_log_probs(tape: Tape, prompt: Var, bundle: PromptBundle) -> Var:
    rows = gather_rows(prompt, [bundle.entity_row_index[e] for e, _ in bundle.candidates])
    return log_softmax_rows(transpose(head_logits(tape, rows, bundle.question_vector)))


def selection_loss(log_probs: Var, bundle: PromptBundle, label: Iterable[int]) -> Var:
    """Mean negative log-probability over the labelled candidates."""
    label = set(label)
    positions = [i for i, (e, _) in enumerate(bundle.candidates) if e in label]
    if not positions:
        raise ValidationError("no labelled entity among the candidates")
    weights = np.zeros(log_probs.shape)
    weights[0, positions] = 1.0 / len(positions)
    return scale(reduce_sum(mul(log_probs, log_probs.tape.constant(weights))), -1.0)


def relations_for(subgraph: Subgraph, entity: int) -> tuple[tuple[str, str, str], ...]:
    index = subgraph.index_of(entity)
    return tuple(
        (subgraph.nodes[e.head].label, e.relation_label, subgraph.nodes[e.tail].label)
        for e in subgraph.incident_edges(index)
    )


def selection_from_log_probs(bundle: PromptBundle, log_probs: np.ndarray,
                             top_m: int = DEFAULT_TOP_M) -> SelectionResult:
    probs = np.exp(np.asarray(log_probs, dtype=np.float64).reshape(-1))
    ranked = sorted(((e, float(p)) for (e, _), p in zip(bundle.candidates, probs)),
                    key=lambda pair: (-pair[1], pair[0]))
    selected = tuple(e for e, _ in ranked[:top_m])
    return SelectionResult(tuple(ranked), selected,
                           {e: relations_for(bundle.subgraph, e) for e in selected})


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def score_candidates(bundle: PromptBundle, params: ParameterStore,
                     top_m: int = DEFAULT_TOP_M) -> SelectionResult:
    tape = Tape(params)
    log_probs = candidate_log_probs(tape, tape.constant(bundle.soft_prompt), bundle)
    return selection_from_log_probs(bundle, log_probs.value, top_m)


class Selector(Protocol):
    def __call__(self, bundle: PromptBundle) -> SelectionResult:
        ...


class ModelSelector:
    kind = "model"

    def __init__(self, params: ParameterStore, top_m: int = DEFAULT_TOP_M):
        self.params = params
        self.top_m = top_m

    def __call__(self, bundle: PromptBundle) -> SelectionResult:
        return score_candidates(bundle, self.params, self.top_m)


class OracleSelector:
    """Ranks the injected label entities first; used to check harness neutrality."""
    kind = "oracle"

    def __init__(self, label: Iterable[int], top_m: int = DEFAULT_TOP_M):
        self.label = frozenset(label)
        self.top_m = top_m

    def __call__(self, bundle: PromptBundle) -> SelectionResult:
        logits = np.array([10.0 if e in self.label else 0.0 for e, _ in bundle.candidates])
        return selection_from_log_probs(bundle, _log_softmax(logits), self.top_m)


class ExternalSelector:
    """Sends the bundle (soft prompt rows as JSON) to an embedding-accepting endpoint.

    `transport` takes the payload dict and returns {"selected": [candidate labels]}.
    """
    kind = "external"

    def __init__(self, transport: Callable[[dict], dict], top_m: int = DEFAULT_TOP_M):
        self.transport = transport
        self.top_m = top_m

    def __call__(self, bundle: PromptBundle) -> SelectionResult:
        reply = self.transport(bundle.to_payload())
        chosen = [label for label in reply.get("selected", [])]
        rank = {label: i for i, label in enumerate(chosen)}
        logits = np.array([10.0 - rank[label] if label in rank else 0.0 for _, label in bundle.candidates])
        return selection_from_log_probs(bundle, _log_softmax(logits), self.top_m)


def mock_selector_transport(payload: dict) -> dict:
    return {"selected": payload["candidates"][:DEFAULT_TOP_M]}


def _undirected_distances(graph: KnowledgeGraph, source: int) -> dict[int, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        entity = queue.popleft()
        for _, other in graph.out_adjacency.get(entity, ()) + graph.in_adjacency.get(entity, ()):
            if other not in dist:
                dist[other] = dist[entity] + 1
                queue.append(other)
    return dist


def build_labels(graph: KnowledgeGraph, topic: int, answers: Iterable[int]) -> SelectionLabel:
    """Entities on any shortest undirected topic->answer path, topic excluded.

    An answer adjacent to the topic contributes only itself, which is the one-hop rule.
    """
    answers = set(answers)
    for entity in {topic, *answers}:
        if not graph.has_entity(entity):
            raise NotFoundError(f"unknown entity id {entity}")
    if not answers:
        raise UnlabelableError("no answer entities given")
    from_topic = _undirected_distances(graph, topic)
    entities = set()
    for answer in answers:
        if answer == topic or answer not in from_topic:
            continue
        from_answer = _undirected_distances(graph, answer)
        length = from_topic[answer]
        entities |= {
            v for v, d in from_topic.items()
            if v != topic and d + from_answer.get(v, length + 1) == length
        }
    if not entities:
        raise UnlabelableError(f"no path from topic {graph.label(topic)!r} to any answer")
    return SelectionLabel(frozenset(entities))


def verbalize_subgraph(subgraph: Subgraph) -> str:
    """Every triple of the subgraph; nodes with no edge are listed by label."""
    lines = [f"({subgraph.nodes[e.head].label}, {e.relation_label}, {subgraph.nodes[e.tail].label})"
             for e in subgraph.edges]
    touched = {e.head for e in subgraph.edges} | {e.tail for e in subgraph.edges}
    lines += [f"{node.label} (no incident relations retrieved)"
              for i, node in enumerate(subgraph.nodes) if i not in touched]
    return "\n".join(lines)


def verbalize(result: SelectionResult, subgraph: Subgraph) -> str:
    if not result.selected:
        raise ValidationError("nothing selected to verbalize")
    lines = []
    for entity in result.selected:
        relations = result.relations.get(entity) or relations_for(subgraph, entity)
        if not relations:
            lines.append(f"{subgraph.nodes[subgraph.index_of(entity)].label} (no incident relations retrieved)")
        for h, r, t in relations:
            line = f"({h}, {r}, {t})"
            # triples shared by two selected entities are listed once
            if line not in lines:
                lines.append(line)
    return "\n".join(lines)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    lr: float = 0.01
    optimizer: OptimizerConfig = OptimizerConfig()
    holdout_fraction: float = 0.2
    seed: int = 0
    top_m: int = DEFAULT_TOP_M
    freeze_head: bool = False
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be at least 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValidationError(f"holdout fraction must be in [0, 1), got {self.holdout_fraction}")


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    heldout_hits: list[float] = field(default_factory=list)
    train_examples: int = 0
    heldout_examples: int = 0
    skipped_unlabelable: int = 0
    skipped_outside_subgraph: int = 0
    clipped_labels: int = 0
    checkpoints: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "epoch_losses": [round(x, 6) for x in self.epoch_losses],
            "heldout_hits": [round(x, 6) for x in self.heldout_hits],
            "train_examples": self.train_examples,
            "heldout_examples": self.heldout_examples,
            "skipped_unlabelable": self.skipped_unlabelable,
            "skipped_outside_subgraph": self.skipped_outside_subgraph,
            "clipped_labels": self.clipped_labels,
            "checkpoints": self.checkpoints,
        }


@dataclass(frozen=True)
class Example:
    record: DatasetRecord
    subgraph: Subgraph
    message_graph: MessageGraph
    label: frozenset[int]


def prepare_examples(dataset: Iterable[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
                     extraction: ExtractionConfig, encoder: EncoderConfig,
                     report: TrainingReport) -> list[Example]:
    examples = []
    for record in dataset:
        try:
            topic = graph.entity_id(record.topic_entity)
            answers = [a for a in (graph.find_entity(x) for x in record.answers) if a is not None]
            label = build_labels(graph, topic, answers)
        except (NotFoundError, UnlabelableError) as exc:
            report.skipped_unlabelable += 1
            logger.debug("skipping %s: %s", record.id, exc)
            continue
        subgraph = extract(graph, provider, record.question, topic, extraction)
        inside = frozenset(e for e in label.entities if subgraph.contains(e) and e != subgraph.root)
        if len(inside) < len(label.entities):
            report.clipped_labels += 1
            logger.debug("%s: %d of %d label entities outside the subgraph",
                         record.id, len(label.entities) - len(inside), len(label.entities))
        if not inside:
            report.skipped_outside_subgraph += 1
            continue
        examples.append(Example(record, subgraph, build_message_graph(subgraph, provider, encoder.self_loops),
                                inside))
    return examples


def example_forward(tape: Tape, example: Example, provider: EmbeddingProvider,
                    encoder: EncoderConfig) -> tuple[Var, PromptBundle]:
    q = provider.embed(example.record.question)
    prompt, _ = encode_on_tape(tape, example.subgraph, q, provider, encoder, example.message_graph)
    bundle = build_bundle(example.subgraph, example.record.question, prompt.value, provider)
    return candidate_log_probs(tape, prompt, bundle), bundle


def example_loss(tape: Tape, example: Example, provider: EmbeddingProvider, encoder: EncoderConfig) -> Var:
    log_probs, bundle = example_forward(tape, example, provider, encoder)
    return selection_loss(log_probs, bundle, example.label)


def selection_accuracy(examples: list[Example], params: ParameterStore, provider: EmbeddingProvider,
                       encoder: EncoderConfig) -> float:
    """Fraction of examples whose top-ranked candidate is a labelled entity."""
    if not examples:
        return 0.0
    hits = 0
    for example in examples:
        log_probs, bundle = example_forward(Tape(params), example, provider, encoder)
        result = selection_from_log_probs(bundle, log_probs.value, 1)
        hits += result.selected[0] in example.label
    return hits / len(examples)


def train(dataset: list[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
          params: ParameterStore, extraction: ExtractionConfig, encoder: EncoderConfig,
          cfg: TrainingConfig | None = None) -> TrainingReport:
    cfg = cfg or TrainingConfig()
    if not dataset:
        raise TrainingError("training dataset is empty")
    if encoder.prompt_mode == "text":
        raise TrainingError("text prompt mode has no trainable selector")
    report = TrainingReport()
    examples = prepare_examples(dataset, graph, provider, extraction, encoder, report)
    if not examples:
        raise TrainingError("no labelable training examples", report.to_dict())
    if report.clipped_labels:
        logger.warning("%d examples had label entities outside their subgraph", report.clipped_labels)

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(examples))
    holdout = min(int(round(cfg.holdout_fraction * len(examples))), len(examples) - 1)
    heldout = [examples[i] for i in order[:holdout]]
    training = [examples[i] for i in order[holdout:]]
    report.train_examples, report.heldout_examples = len(training), len(heldout)
    if not heldout:
        logger.info("no held-out examples; held-out top-1 is not tracked")

    if cfg.freeze_head:
        params.freeze("head.")
    checkpoint_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    params.meta.update({"encoder": encoder.to_dict(), "hops": extraction.hops})

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for i in rng.permutation(len(training)):
            params.zero_grad()
            tape = Tape(params)
            loss = example_loss(tape, training[i], provider, encoder)
            tape.backward(loss)
            optimizer_step(params, cfg.lr, cfg.optimizer)
            losses.append(float(loss.value[0, 0]))
        report.epoch_losses.append(float(np.mean(losses)))
        if heldout:
            report.heldout_hits.append(selection_accuracy(heldout, params, provider, encoder))
        if checkpoint_dir:
            path = checkpoint_dir / f"epoch-{epoch:03d}.json"
            params.save(path)
            report.checkpoints.append(str(path))
        logger.info("epoch %d/%d loss=%.4f heldout top-1=%s", epoch, cfg.epochs, report.epoch_losses[-1],
                    f"{report.heldout_hits[-1]:.3f}" if heldout else "n/a")
    params.zero_grad()
    return report
