"""Question-conditioned graph attention encoder and soft-prompt projection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from engine.embedder import EmbeddingProvider
from engine.errors import ValidationError
from engine.subgraph import Subgraph
from engine.tensor import (ACTIVATIONS, ParameterStore, Tape, Var, activation, add_row, as_matrix,
                           concat_cols, gather_rows, glorot, matmul, mul, row_softmax, scale, scatter)

logger = logging.getLogger(__name__)

# rows of these matrices index subgraph nodes
NodeStateMatrix = np.ndarray
SoftPromptMatrix = np.ndarray

FULL_SIZE_PROFILE = {"d_in": 768, "d_hidden": 128, "d_prompt": 2880, "layers": 2}

# graph: attention over the subgraph; none: candidate labels only; triples: mean of each node's
# verbalized triples; text: no soft prompt, every subgraph triple goes to the answer stage as evidence
PROMPT_MODES = ("graph", "none", "triples", "text")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    d_in: int = 64
    d_hidden: int = 32
    d_prompt: int = 48
    self_loops: bool = True
    activation: str = "elu"
    scoring: str = "dot"
    shared_projection: bool = True
    prompt_mode: str = "graph"

    def __post_init__(self):
        if self.layers < 1:
            raise ValidationError(f"encoder needs at least one layer, got {self.layers}")
        if min(self.d_in, self.d_hidden, self.d_prompt) < 1:
            raise ValidationError("encoder dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.scoring not in ("dot", "additive"):
            raise ValidationError(f"unknown attention scoring {self.scoring!r}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValidationError(f"unknown prompt mode {self.prompt_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_size(cls, **overrides) -> "EncoderConfig":
        return cls(**{**FULL_SIZE_PROFILE, **overrides})


@dataclass(frozen=True)
class MessageGraph:
    """Attention pairs (target i, source j) in both edge directions, plus self-loops."""
    n: int
    targets: np.ndarray
    sources: np.ndarray
    relation_vectors: np.ndarray
    mask: np.ndarray
    degree: np.ndarray

    @property
    def isolated(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.degree == 0)]


@dataclass(frozen=True)
class AttentionMatrix:
    layer: int
    values: np.ndarray
    mask: np.ndarray
    isolated: tuple[int, ...]

    def to_dict(self, labels: list[str] | None = None) -> dict:
        rows = []
        for i, row in enumerate(self.values):
            entries = {
                (labels[j] if labels else str(j)): round(float(row[j]), 6)
                for j in np.flatnonzero(self.mask[i])
            }
            rows.append({"node": labels[i] if labels else i, "weights": entries})
        return {"layer": self.layer, "isolated": list(self.isolated), "rows": rows}


def build_message_graph(subgraph: Subgraph, provider: EmbeddingProvider,
                        self_loops: bool = True) -> MessageGraph:
    n = len(subgraph)
    relations: dict[tuple[int, int], list[np.ndarray]] = {}
    for edge in subgraph.edges:
        vector = provider.embed(edge.relation_label)
        relations.setdefault((edge.head, edge.tail), []).append(vector)
        if edge.head != edge.tail:
            relations.setdefault((edge.tail, edge.head), []).append(vector)
    if self_loops:
        for i in range(n):
            relations.setdefault((i, i), [])

    pairs = sorted(relations)
    zero = np.zeros(provider.dimension)
    vectors = [np.mean(relations[p], axis=0) if relations[p] else zero for p in pairs]
    mask = np.zeros((n, n), dtype=bool)
    for i, j in pairs:
        mask[i, j] = True
    return MessageGraph(
        n=n,
        targets=np.array([i for i, _ in pairs], dtype=np.int64),
        sources=np.array([j for _, j in pairs], dtype=np.int64),
        relation_vectors=np.vstack(vectors) if vectors else np.zeros((0, provider.dimension)),
        mask=mask,
        degree=mask.sum(axis=1),
    )


def init_states(subgraph: Subgraph, provider: EmbeddingProvider) -> NodeStateMatrix:
    if not len(subgraph):
        raise ValidationError("cannot encode an empty subgraph")
    return provider.embed_many(subgraph.labels)


def triple_states(subgraph: Subgraph, provider: EmbeddingProvider) -> NodeStateMatrix:
    """Each node as the mean embedding of its verbalized incident triples; bare label when it has none."""
    labels = init_states(subgraph, provider)
    rows = []
    for index, label_row in enumerate(labels):
        lines = [f"({subgraph.nodes[e.head].label}, {e.relation_label}, {subgraph.nodes[e.tail].label})"
                 for e in subgraph.incident_edges(index)]
        rows.append(provider.embed_many(lines).mean(axis=0) if lines else label_row)
    return np.vstack(rows)


def init_encoder_params(cfg: EncoderConfig, seed: int = 0,
                        store: ParameterStore | None = None) -> ParameterStore:
    store = store if store is not None else ParameterStore()
    rng = np.random.default_rng(seed)
    if cfg.prompt_mode != "graph":
        store.add("input.w", glorot(rng, cfg.d_in, cfg.d_hidden))
        store.add("input.b", np.zeros((1, cfg.d_hidden)))
    for layer in range(cfg.layers if cfg.prompt_mode == "graph" else 0):
        width = cfg.d_in if layer == 0 else cfg.d_hidden
        store.add(f"gat.{layer}.att_w", glorot(rng, cfg.d_in + width, cfg.d_hidden))
        if not cfg.shared_projection:
            store.add(f"gat.{layer}.att_w_dst", glorot(rng, cfg.d_in + width, cfg.d_hidden))
        if cfg.scoring == "additive":
            store.add(f"gat.{layer}.att_a", glorot(rng, 2 * cfg.d_hidden, 1))
        store.add(f"gat.{layer}.w", glorot(rng, width, cfg.d_hidden))
        store.add(f"gat.{layer}.b", np.zeros((1, cfg.d_hidden)))
    store.add("ffn.w1", glorot(rng, cfg.d_hidden, cfg.d_hidden))
    store.add("ffn.b1", np.zeros((1, cfg.d_hidden)))
    store.add("ffn.w2", glorot(rng, cfg.d_hidden, cfg.d_prompt))
    store.add("ffn.b2", np.zeros((1, cfg.d_prompt)))
    store.meta["encoder"] = cfg.to_dict()
    return store


def attention_weights(tape: Tape, q: np.ndarray, states: Var, graph: MessageGraph,
                      layer: int, cfg: EncoderConfig) -> Var:
    """a_ij = softmax_j f(W(q || h_i), W(h_j || r_ij)) over the masked neighbourhood of i."""
    n = graph.n
    if not len(graph.targets):
        return tape.constant(np.zeros((n, n)))
    w_src = tape.param(f"gat.{layer}.att_w")
    w_dst = w_src if cfg.shared_projection else tape.param(f"gat.{layer}.att_w_dst")

    queries = tape.constant(np.tile(as_matrix(q), (n, 1)))
    left = gather_rows(matmul(concat_cols(queries, states), w_src), graph.targets)
    right = matmul(concat_cols(gather_rows(states, graph.sources),
                               tape.constant(graph.relation_vectors)), w_dst)
    if cfg.scoring == "dot":
        ones = tape.constant(np.ones((cfg.d_hidden, 1)))
        raw = scale(matmul(mul(left, right), ones), 1.0 / math.sqrt(cfg.d_hidden))
    else:
        raw = matmul(activation(concat_cols(left, right), "leaky_relu"), tape.param(f"gat.{layer}.att_a"))
    return row_softmax(scatter(raw, graph.targets, graph.sources, (n, n)), graph.mask)


def gat_layer(tape: Tape, states: Var, attn: Var, graph: MessageGraph, layer: int,
              kind: str = "elu") -> Var:
    """H' = act(D^-1/2 A D^-1/2 H W + b) with D the neighbourhood counts of the mask."""
    inv_sqrt = np.divide(1.0, np.sqrt(graph.degree), out=np.zeros(graph.n), where=graph.degree > 0)
    normalized = mul(attn, tape.constant(np.outer(inv_sqrt, inv_sqrt)))
    messages = matmul(matmul(normalized, states), tape.param(f"gat.{layer}.w"))
    return activation(add_row(messages, tape.param(f"gat.{layer}.b")), kind)


def effective_layers(cfg: EncoderConfig, subgraph: Subgraph) -> int:
    if cfg.layers != subgraph.hops:
        logger.warning("encoder has %d layers but the subgraph was extracted with %d hops; using %d",
                       cfg.layers, subgraph.hops, min(cfg.layers, subgraph.hops))
    return min(cfg.layers, subgraph.hops)


def encode_on_tape(tape: Tape, subgraph: Subgraph, q: np.ndarray, provider: EmbeddingProvider,
                   cfg: EncoderConfig, graph: MessageGraph | None = None) -> tuple[Var, list[Var]]:
    if cfg.prompt_mode == "text":
        raise ValidationError("text prompt mode has no soft prompt to encode")
    attentions = []
    if cfg.prompt_mode == "graph":
        graph = graph or build_message_graph(subgraph, provider, cfg.self_loops)
        states = tape.constant(init_states(subgraph, provider))
        for layer in range(effective_layers(cfg, subgraph)):
            attn = attention_weights(tape, q, states, graph, layer, cfg)
            attentions.append(attn)
            states = gat_layer(tape, states, attn, graph, layer, cfg.activation)
    else:
        rows = init_states(subgraph, provider) if cfg.prompt_mode == "none" else triple_states(subgraph, provider)
        projected = add_row(matmul(tape.constant(rows), tape.param("input.w")), tape.param("input.b"))
        states = activation(projected, cfg.activation)
    hidden = activation(add_row(matmul(states, tape.param("ffn.w1")), tape.param("ffn.b1")), cfg.activation)
    prompt = add_row(matmul(hidden, tape.param("ffn.w2")), tape.param("ffn.b2"))
    return prompt, attentions


def encode(subgraph: Subgraph, question: str, provider: EmbeddingProvider,
           params: ParameterStore, cfg: EncoderConfig) -> SoftPromptMatrix:
    prompt, _ = encode_on_tape(Tape(params), subgraph, provider.embed(question), provider, cfg)
    return prompt.value


def dump_attention(subgraph: Subgraph, question: str, provider: EmbeddingProvider,
                   params: ParameterStore, cfg: EncoderConfig) -> list[AttentionMatrix]:
    graph = build_message_graph(subgraph, provider, cfg.self_loops)
    _, attentions = encode_on_tape(Tape(params), subgraph, provider.embed(question), provider, cfg, graph)
    return [AttentionMatrix(layer, attn.value, graph.mask, tuple(graph.isolated))
            for layer, attn in enumerate(attentions)]
