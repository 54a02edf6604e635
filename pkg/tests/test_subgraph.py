import logging

import pytest

from conftest import random_graph
from engine.embedder import HashEmbeddingProvider
from engine.errors import NotFoundError, ValidationError
from engine.kg_store import KnowledgeGraph, PerturbationSpec, Scope, Triple, perturb, removed_edges
from engine.subgraph import ExtractionConfig, extract, induced_edges

QUESTION = "What is the official language of the country where the owner of Knews operates?"


def test_two_hop_extraction_on_toy_graph(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=2))
    assert subgraph.root == 0
    assert set(subgraph.labels) == {"Knews", "SPP Media Group", "English", "Cyprus"}
    hops = {node.label: node.hop for node in subgraph.nodes}
    assert hops == {"Knews": 0, "SPP Media Group": 1, "English": 1, "Cyprus": 2}
    edges = {(subgraph.nodes[e.head].label, e.relation_label, subgraph.nodes[e.tail].label) for e in subgraph.edges}
    assert edges == {("Knews", "owned by", "SPP Media Group"), ("Knews", "language", "English"),
                     ("SPP Media Group", "operates in", "Cyprus")}
    assert not subgraph.isolated


def test_one_hop_extraction(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=1))
    assert set(subgraph.labels) == {"Knews", "SPP Media Group", "English"}
    assert len(subgraph.edges) == 2


def test_first_hop_width_is_k1(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=1, k1=1))
    assert len(subgraph) == 2


def test_outgoing_direction_only(fig1_graph, provider):
    cyprus = fig1_graph.entity_id("Cyprus")
    subgraph = extract(fig1_graph, provider, QUESTION, cyprus, ExtractionConfig(hops=1, direction="out"))
    assert set(subgraph.labels) == {"Cyprus", "Greek", "Nicosia"}


def test_incoming_only_direction_is_rejected():
    with pytest.raises(ValidationError):
        ExtractionConfig(direction="in")
    with pytest.raises(ValidationError):
        ExtractionConfig(hops=0)
    with pytest.raises(ValidationError):
        ExtractionConfig(k2=0)


def test_isolated_topic_gives_single_node(provider, caplog):
    graph = KnowledgeGraph(["a", "b", "lonely"], ["r"], [Triple(0, 0, 1)])
    with caplog.at_level(logging.WARNING, logger="engine.subgraph"):
        subgraph = extract(graph, provider, "anything about lonely", 2)
    assert subgraph.isolated
    assert subgraph.labels == ["lonely"]
    assert subgraph.edges == ()
    assert "no neighbours" in caplog.text


def test_unknown_topic(fig1_graph, provider):
    with pytest.raises(NotFoundError):
        extract(fig1_graph, provider, QUESTION, 42)


def test_structural_invariants_on_random_graphs(rng):
    provider = HashEmbeddingProvider(16)
    for trial in range(30):
        graph = random_graph(rng, int(rng.integers(5, 40)), relations=4)
        cfg = ExtractionConfig(hops=int(rng.integers(1, 4)), k1=int(rng.integers(1, 6)), k2=int(rng.integers(1, 6)))
        topic = int(rng.integers(graph.num_entities))
        subgraph = extract(graph, provider, f"question {trial} about node {topic}", topic, cfg)
        assert subgraph.nodes[0].entity == topic and subgraph.nodes[0].hop == 0
        assert len(set(subgraph.entity_ids)) == len(subgraph)
        for hop in range(1, cfg.hops + 1):
            width = sum(1 for node in subgraph.nodes if node.hop == hop)
            assert width <= (cfg.k1 if hop == 1 else cfg.k2)
        members = set(subgraph.entity_ids)
        expected = {t for t in graph.triples if t.head in members and t.tail in members}
        got = {Triple(subgraph.nodes[e.head].entity, e.relation, subgraph.nodes[e.tail].entity)
               for e in subgraph.edges}
        assert got == expected


def subgraph_triples(subgraph):
    return {Triple(subgraph.nodes[e.head].entity, e.relation, subgraph.nodes[e.tail].entity) for e in subgraph.edges}


def test_wider_k2_only_adds_nodes(rng):
    provider = HashEmbeddingProvider(16)
    for trial in range(40):
        graph = random_graph(rng, int(rng.integers(6, 40)), relations=4)
        topic = int(rng.integers(graph.num_entities))
        hops, k1, k2 = int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
        question = f"question {trial} about node {topic}"
        narrow = extract(graph, provider, question, topic, ExtractionConfig(hops, k1, k2))
        wide = extract(graph, provider, question, topic, ExtractionConfig(hops, k1, k2 + int(rng.integers(1, 5))))
        assert set(narrow.entity_ids) <= set(wide.entity_ids)
        assert subgraph_triples(narrow) <= subgraph_triples(wide)


@pytest.mark.parametrize("scope", [Scope.ALL, Scope.TOPIC])
def test_perturbed_extraction_stays_inside_the_original_graph(rng, scope):
    provider = HashEmbeddingProvider(16)
    for trial in range(20):
        graph = random_graph(rng, int(rng.integers(6, 30)), relations=4, extra_edges=30)
        topic = int(rng.integers(graph.num_entities))
        spec = PerturbationSpec(float(rng.uniform(0.05, 0.5)), scope, seed=trial)
        removed = removed_edges(graph, spec, [topic])
        perturbed = perturb(graph, spec, [topic])
        assert set(perturbed.triples) == set(graph.triples) - removed
        subgraph = extract(perturbed, provider, f"question {trial}", topic, ExtractionConfig(hops=3, k1=50, k2=50))
        assert subgraph_triples(subgraph) <= set(graph.triples)
        assert not subgraph_triples(subgraph) & removed


def test_induced_edges_matches_full_scan(rng):
    for _ in range(200):
        graph = random_graph(rng, int(rng.integers(3, 25)), relations=3)
        size = int(rng.integers(0, graph.num_entities + 1))
        subset = set(int(e) for e in rng.choice(graph.num_entities, size=size, replace=False))
        expected = [t for t in graph.triples if t.head in subset and t.tail in subset]
        assert induced_edges(graph, subset) == expected


def test_extraction_is_deterministic(fig1_graph):
    first = extract(fig1_graph, HashEmbeddingProvider(16), QUESTION, 0)
    second = extract(fig1_graph, HashEmbeddingProvider(16), QUESTION, 0)
    assert first.to_dict() == second.to_dict()


def test_reorder_permutes_nodes_and_edges(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0)
    order = list(reversed(range(len(subgraph))))
    reordered = subgraph.reorder(order)
    assert reordered.labels == list(reversed(subgraph.labels))
    labelled = lambda g: {(g.nodes[e.head].label, e.relation_label, g.nodes[e.tail].label) for e in g.edges}
    assert labelled(reordered) == labelled(subgraph)


def test_to_dict_shape(fig1_graph, provider):
    payload = extract(fig1_graph, provider, QUESTION, 0).to_dict()
    assert payload["root_label"] == "Knews"
    assert payload["hops"] == 2
    assert {"index", "entity", "label", "hop", "score"} <= set(payload["nodes"][0])
    assert {"head_label", "relation", "tail_label"} <= set(payload["edges"][0])
