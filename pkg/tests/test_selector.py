import json
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_graph
from engine.embedder import HashEmbeddingProvider
from engine.errors import NotFoundError, ParseError, TrainingError, UnlabelableError, ValidationError
from engine.gat import EncoderConfig, build_message_graph, encode
from engine.kg_store import KnowledgeGraph, Triple
from engine.selector import (DatasetRecord, Example, ExternalSelector, ModelSelector, OracleSelector,
                             SelectionResult, TrainingConfig, build_bundle, build_labels, candidate_indexes,
                             example_loss, init_model_params, mock_selector_transport, read_dataset,
                             score_candidates, train, verbalize, verbalize_subgraph, write_dataset)
from engine.subgraph import ExtractionConfig, Subgraph, SubgraphNode, extract
from engine.tensor import Tape, grad_check
from test_gat import QUESTION as WALK_QUESTION, sampled_subgraphs

GOLDEN = Path(__file__).parent / "golden"
QUESTION = "What is the official language of the country where the owner of Knews operates?"

FIG1_DATASET = [
    DatasetRecord(QUESTION, "Knews", ("Greek",), "q1"),
    DatasetRecord("Who owns Knews?", "Knews", ("SPP Media Group",), "q2"),
    DatasetRecord("What language is Knews published in?", "Knews", ("English",), "q3"),
    DatasetRecord("Where does SPP Media Group operate?", "SPP Media Group", ("Cyprus",), "q4"),
]


def fig1_bundle(fig1_graph, provider, small_encoder, small_params, question=QUESTION):
    subgraph = extract(fig1_graph, provider, question, 0, ExtractionConfig(hops=2))
    prompt = encode(subgraph, question, provider, small_params, small_encoder)
    return build_bundle(subgraph, question, prompt, provider)


def shortest_path_entities(graph, topic, answer):
    """Every vertex on some shortest simple path, found by iterative deepening."""
    adjacent = {e: set() for e in range(graph.num_entities)}
    for t in graph.triples:
        adjacent[t.head].add(t.tail)
        adjacent[t.tail].add(t.head)
    for limit in range(1, graph.num_entities):
        found = set()

        def walk(node, path):
            if node == answer:
                found.update(path)
                return
            if len(path) > limit:
                return
            for other in adjacent[node]:
                if other not in path:
                    walk(other, path + [other])

        walk(topic, [topic])
        if found:
            return found - {topic}
    return set()


def test_labels_on_toy_graph(fig1_graph):
    ids = {label: fig1_graph.entity_id(label) for label in ("Knews", "SPP Media Group", "Cyprus", "Greek")}
    label = build_labels(fig1_graph, ids["Knews"], [ids["Greek"]])
    assert label.entities == {ids["SPP Media Group"], ids["Cyprus"], ids["Greek"]}
    assert build_labels(fig1_graph, ids["Knews"], [ids["SPP Media Group"]]).entities == {ids["SPP Media Group"]}


def test_labels_follow_every_shortest_path(rng):
    for _ in range(200):
        graph = random_graph(rng, int(rng.integers(3, 8)), extra_edges=int(rng.integers(0, 6)))
        topic, answer = (int(x) for x in rng.choice(graph.num_entities, size=2, replace=False))
        label = build_labels(graph, topic, [answer])
        assert label.entities == shortest_path_entities(graph, topic, answer)


def test_labels_edge_cases():
    graph = KnowledgeGraph(["a", "b", "c"], ["r"], [Triple(0, 0, 1)])
    with pytest.raises(UnlabelableError):
        build_labels(graph, 0, [2])
    with pytest.raises(UnlabelableError):
        build_labels(graph, 0, [])
    with pytest.raises(NotFoundError):
        build_labels(graph, 0, [9])


def test_candidates_leave_out_the_root(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=2))
    indexes = candidate_indexes(subgraph)
    assert subgraph.index_of(0) not in indexes
    assert len(indexes) == len(subgraph) - 1
    lonely = Subgraph(7, (SubgraphNode(7, "lonely", 0, 0.0),), (), 1, isolated=True)
    assert candidate_indexes(lonely) == [0]


def test_candidate_probabilities_form_a_distribution(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    result = score_candidates(bundle, small_params, top_m=2)
    assert sum(p for _, p in result.ranked) == pytest.approx(1.0, abs=1e-9)
    assert len(result.selected) == 2
    assert [e for e, _ in result.ranked[:2]] == list(result.selected)
    assert {e for e, _ in result.ranked} == {e for e, _ in bundle.candidates}


def test_ranking_survives_positive_rescaling(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    scaled = build_bundle(bundle.subgraph, bundle.question, bundle.soft_prompt * 3.0, provider)
    before = [e for e, _ in score_candidates(bundle, small_params).ranked]
    after = [e for e, _ in score_candidates(scaled, small_params).ranked]
    assert before == after


def test_bundle_rejects_mismatched_prompt(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=2))
    with pytest.raises(ValidationError):
        build_bundle(subgraph, QUESTION, np.zeros((len(subgraph) + 1, 4)), provider)


def test_bundle_payload(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    payload = bundle.to_payload()
    assert payload["question"] == QUESTION
    assert "Knews" not in payload["candidates"]
    assert len(payload["soft_prompt"]) == len(payload["candidates"])
    assert len(payload["soft_prompt"][0]) == small_encoder.d_prompt
    json.dumps(payload)


def test_verbalize_matches_golden(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=2))
    spp, cyprus = fig1_graph.entity_id("SPP Media Group"), fig1_graph.entity_id("Cyprus")
    result = SelectionResult(((spp, 0.6), (cyprus, 0.4)), (spp, cyprus))
    expected = (GOLDEN / "verbalize_fig1.txt").read_text(encoding="utf-8").strip()
    assert verbalize(result, subgraph) == expected


def test_verbalize_entity_without_relations():
    subgraph = Subgraph(0, (SubgraphNode(0, "a", 0, 0.0), SubgraphNode(5, "c", 1, 0.0)), (), 1)
    text = verbalize(SelectionResult(((5, 1.0),), (5,)), subgraph)
    assert text == "c (no incident relations retrieved)"
    with pytest.raises(ValidationError):
        verbalize(SelectionResult((), ()), subgraph)


def test_verbalize_whole_subgraph(fig1_graph, provider):
    subgraph = extract(fig1_graph, provider, QUESTION, 0, ExtractionConfig(hops=2))
    assert set(verbalize_subgraph(subgraph).splitlines()) == {
        "(Knews, owned by, SPP Media Group)",
        "(SPP Media Group, operates in, Cyprus)",
        "(Knews, language, English)",
    }
    lone = Subgraph(0, (SubgraphNode(0, "a", 0, 0.0),), (), 1)
    assert verbalize_subgraph(lone) == "a (no incident relations retrieved)"


def test_oracle_selector_puts_label_first(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    cyprus = fig1_graph.entity_id("Cyprus")
    result = OracleSelector({cyprus}, top_m=1)(bundle)
    assert result.selected == (cyprus,)
    assert result.relations[cyprus] == (("SPP Media Group", "operates in", "Cyprus"),)


def test_external_selector_keeps_reply_order(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    result = ExternalSelector(lambda payload: {"selected": ["Cyprus", "English"]}, top_m=2)(bundle)
    assert [fig1_graph.label(e) for e in result.selected] == ["Cyprus", "English"]

    mocked = ExternalSelector(mock_selector_transport)(bundle)
    assert [fig1_graph.label(e) for e in mocked.selected] == [label for _, label in bundle.candidates][:3]


def test_model_selector_matches_scoring(fig1_graph, provider, small_encoder, small_params):
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params)
    assert ModelSelector(small_params, top_m=2)(bundle) == score_candidates(bundle, small_params, 2)


def test_dataset_file_round_trip(tmp_path):
    path = tmp_path / "dataset.jsonl"
    write_dataset(path, FIG1_DATASET)
    assert read_dataset(path) == FIG1_DATASET


def test_dataset_errors_name_the_line(tmp_path):
    path = tmp_path / "dataset.jsonl"
    path.write_text('{"question": "q", "topic_entity": "Knews", "answers": ["Greek"]}\n{oops\n',
                    encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_dataset(path)
    assert info.value.line_no == 2
    path.write_text('{"question": "q", "topic_entity": "Knews", "answers": []}\n', encoding="utf-8")
    with pytest.raises(ParseError):
        read_dataset(path)


def test_record_ids_default_to_line_numbers(tmp_path):
    path = tmp_path / "dataset.jsonl"
    path.write_text('\n{"question": "q", "topic_entity": "Knews", "answers": ["Greek"], "depth": 3}\n',
                    encoding="utf-8")
    record = read_dataset(path)[0]
    assert record.id == "q2"
    assert record.depth == 3


def test_training_lowers_the_loss(fig1_graph, provider, small_encoder, tmp_path):
    params = init_model_params(small_encoder, seed=0)
    dataset = FIG1_DATASET + [DatasetRecord("Where is Atlantis?", "Atlantis", ("Greek",), "q5")]
    cfg = TrainingConfig(epochs=15, lr=0.05, holdout_fraction=0.0, checkpoint_dir=str(tmp_path / "ckpt"))
    report = train(dataset, fig1_graph, provider, params, ExtractionConfig(hops=2), small_encoder, cfg)
    assert report.train_examples == 4
    assert report.heldout_examples == 0
    assert report.heldout_hits == []
    assert report.skipped_unlabelable == 1
    assert report.clipped_labels == 1
    assert len(report.epoch_losses) == 15
    assert report.epoch_losses[-1] < report.epoch_losses[0]
    assert len(report.checkpoints) == 15
    assert Path(report.checkpoints[-1]).name == "epoch-015.json"
    assert params.meta["hops"] == 2
    assert params.meta["encoder"]["d_in"] == small_encoder.d_in


def test_frozen_head_stays_put(fig1_graph, provider, small_encoder):
    params = init_model_params(small_encoder, seed=0)
    head = {name: params.value(name).copy() for name in params.names() if name.startswith("head.")}
    ffn = params.value("ffn.w2").copy()
    train(FIG1_DATASET, fig1_graph, provider, params, ExtractionConfig(hops=2), small_encoder,
          TrainingConfig(epochs=2, lr=0.05, freeze_head=True))
    for name, value in head.items():
        assert_allclose(params.value(name), value)
    assert not np.allclose(params.value("ffn.w2"), ffn)


def test_training_failures(fig1_graph, provider, small_encoder):
    params = init_model_params(small_encoder)
    with pytest.raises(TrainingError):
        train([], fig1_graph, provider, params, ExtractionConfig(hops=2), small_encoder)
    unlabelable = [DatasetRecord("Where is Atlantis?", "Atlantis", ("Greek",))]
    with pytest.raises(TrainingError) as info:
        train(unlabelable, fig1_graph, provider, params, ExtractionConfig(hops=2), small_encoder)
    assert info.value.diagnostics["skipped_unlabelable"] == 1


def test_training_config_is_validated():
    with pytest.raises(ValidationError):
        TrainingConfig(epochs=0)
    with pytest.raises(ValidationError):
        TrainingConfig(holdout_fraction=1.0)


def labelled_examples(provider, cfg, seed, count):
    examples = []
    for subgraph in sampled_subgraphs(seed, count, provider):
        indexes = candidate_indexes(subgraph)
        label = frozenset(subgraph.nodes[i].entity for i in indexes[:2])
        record = DatasetRecord(WALK_QUESTION, subgraph.nodes[0].label, ("x",))
        examples.append(Example(record, subgraph, build_message_graph(subgraph, provider, cfg.self_loops), label))
    return examples


def test_loss_gradients_match_finite_differences():
    provider = HashEmbeddingProvider(8)
    cfg = EncoderConfig(layers=2, d_in=8, d_hidden=4, d_prompt=5, activation="tanh")
    for n, example in enumerate(labelled_examples(provider, cfg, 19, 5)):
        params = init_model_params(cfg, seed=n)
        params.set_value("head.w", np.random.default_rng(n).normal(size=(cfg.d_prompt, 1)))
        report = grad_check(lambda tape: example_loss(tape, example, provider, cfg), params)
        assert report.passed, report.worst()


def test_untrained_head_scores_candidates_uniformly(small_encoder, provider):
    for n, example in enumerate(labelled_examples(provider, small_encoder, 31, 5)):
        params = init_model_params(small_encoder, seed=n)
        params.set_value("head.wq", np.zeros_like(params.value("head.wq")))
        loss = example_loss(Tape(params), example, provider, small_encoder)
        candidates = len(candidate_indexes(example.subgraph))
        assert_allclose(loss.value[0, 0], np.log(candidates), rtol=1e-12)


def test_single_question_is_memorized(fig1_graph, provider, small_encoder, small_params):
    question = "Who owns Knews?"
    record = next(r for r in FIG1_DATASET if r.question == question)
    report = train([record], fig1_graph, provider, small_params, ExtractionConfig(hops=2), small_encoder,
                   TrainingConfig(epochs=150, lr=0.05, holdout_fraction=0.0))
    assert report.epoch_losses[-1] < 0.01
    bundle = fig1_bundle(fig1_graph, provider, small_encoder, small_params, question=question)
    assert score_candidates(bundle, small_params).selected[0] == fig1_graph.entity_id("SPP Media Group")


def test_epoch_losses_mostly_decrease(fig1_graph, provider, small_encoder, small_params):
    report = train(FIG1_DATASET, fig1_graph, provider, small_params, ExtractionConfig(hops=2), small_encoder,
                   TrainingConfig(epochs=6, lr=0.01, holdout_fraction=0.0))
    losses = report.epoch_losses
    assert sum(later <= earlier for earlier, later in zip(losses, losses[1:])) >= 4


def test_held_out_accuracy_is_tracked_per_epoch(fig1_graph, provider, small_encoder, small_params):
    report = train(FIG1_DATASET, fig1_graph, provider, small_params, ExtractionConfig(hops=2), small_encoder,
                   TrainingConfig(epochs=3, lr=0.05, holdout_fraction=0.25))
    assert (report.train_examples, report.heldout_examples) == (3, 1)
    assert len(report.heldout_hits) == 3
    assert all(hit in (0.0, 1.0) for hit in report.heldout_hits)


def test_text_mode_cannot_be_trained(fig1_graph, provider):
    cfg = EncoderConfig(layers=2, d_in=16, d_hidden=8, d_prompt=8, prompt_mode="text")
    with pytest.raises(TrainingError):
        train(FIG1_DATASET, fig1_graph, provider, init_model_params(cfg), ExtractionConfig(hops=2), cfg)


@pytest.mark.parametrize("mode", ["none", "triples"])
def test_flat_prompt_modes_train(mode, fig1_graph, provider):
    cfg = EncoderConfig(layers=2, d_in=16, d_hidden=8, d_prompt=8, prompt_mode=mode)
    params = init_model_params(cfg)
    report = train(FIG1_DATASET, fig1_graph, provider, params, ExtractionConfig(hops=2), cfg,
                   TrainingConfig(epochs=10, lr=0.05, holdout_fraction=0.0))
    assert report.epoch_losses[-1] < report.epoch_losses[0]
    assert params.meta["encoder"]["prompt_mode"] == mode
