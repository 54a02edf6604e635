import json
from dataclasses import replace

import httpx
import numpy as np
import pytest

from conftest import random_graph
from engine.embedder import HashEmbeddingProvider
from engine.errors import (ConfigurationError, DecisionParseError, GroundingError, NotFoundError, TransportError,
                           ValidationError)
from engine.gat import EncoderConfig
from engine.orchestrator import (DecisionKind, EfficiencyReport, HttpChatBackend, ReasonConfig, ScriptedBackend,
                                 Terminal, account, aggregate, build_backend, efficiency_table, parse_decision,
                                 reason, render, write_traces)
from engine.selector import OracleSelector, init_model_params
from engine.subgraph import ExtractionConfig

QUESTION = "What is the official language of the country where the owner of Knews operates?"


def walking(*steps):
    """Script for QUESTION: at each topic, reply with the given line."""
    return ScriptedBackend({QUESTION: [{"topic": topic, "reply": reply} for topic, reply in steps]})


class FailingBackend:
    kind = "failing"

    def complete(self, system_prompt, user_prompt):
        raise TransportError("connection refused", 2)


class RandomBackend:
    kind = "random"

    def __init__(self, rng, labels):
        self.rng = rng
        self.labels = labels

    def complete(self, system_prompt, user_prompt):
        label = self.labels[int(self.rng.integers(len(self.labels)))]
        return str(self.rng.choice([
            f"FINAL: {label}",
            f"NEXT: {label}",
            f"I need more context.\nnext: {label}.",
            "not sure",
            "",
            "NEXT: nowhere special",
        ]))


def test_immediate_answer(fig1_graph, provider, small_params, reason_cfg):
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg,
                           ScriptedBackend.answering({QUESTION: "Greek"}))
    assert answer == "Greek"
    assert trace.terminal is Terminal.ANSWERED
    assert trace.topics == ["Knews"]
    assert (trace.select_calls, trace.answer_calls, trace.reformat_calls) == (1, 1, 0)


def test_continues_from_a_new_topic(fig1_graph, provider, small_params, reason_cfg):
    backend = walking(("Knews", "NEXT: Cyprus"), ("Cyprus", "FINAL: Greek"))
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)
    assert answer == "Greek"
    assert trace.topics == ["Knews", "Cyprus"]
    assert trace.iterations[0].decision == {"kind": "continue", "answer": None, "next_entity": "Cyprus",
                                            "rationale": ""}
    assert (trace.select_calls, trace.answer_calls) == (2, 2)


def test_iteration_cap(fig1_graph, provider, small_params, reason_cfg):
    backend = walking(("Knews", "NEXT: SPP Media Group"), ("SPP Media Group", "NEXT: Cyprus"),
                      ("Cyprus", "NEXT: Greek"), ("Greek", "NEXT: Nicosia"))
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)
    assert answer is None
    assert trace.terminal is Terminal.MAX_ITERATIONS
    assert len(trace.iterations) == reason_cfg.max_iterations
    assert trace.answer_calls == reason_cfg.max_iterations


def test_repeated_topic_is_stuck(fig1_graph, provider, small_params, reason_cfg):
    backend = walking(("Knews", "NEXT: SPP Media Group"), ("SPP Media Group", "NEXT: Knews"))
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)
    assert answer is None
    assert trace.terminal is Terminal.STUCK
    assert trace.topics == ["Knews", "SPP Media Group"]
    assert "repeated" in trace.error


def test_ungrounded_next_is_stuck(fig1_graph, provider, small_params, reason_cfg):
    _, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg,
                      walking(("Knews", "NEXT: Atlantis")))
    assert trace.terminal is Terminal.STUCK
    assert "Atlantis" in trace.error
    assert trace.iterations[0].decision is None


def test_unreadable_reply_gets_one_reformat(fig1_graph, provider, small_params, reason_cfg):
    backend = ScriptedBackend({QUESTION: [{"reply": "Hmm, hard to say."}]}, default="FINAL: Greek")
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)
    assert answer == "Greek"
    assert (trace.answer_calls, trace.reformat_calls) == (1, 1)

    stubborn = ScriptedBackend({QUESTION: [{"reply": "Hmm."}]}, default="still thinking")
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, stubborn)
    assert answer is None
    assert trace.terminal is Terminal.ERROR
    assert trace.reformat_calls == 1


def test_transport_failure_ends_the_trace(fig1_graph, provider, small_params, reason_cfg):
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, FailingBackend())
    assert answer is None
    assert trace.terminal is Terminal.ERROR
    assert "after 2 retries" in trace.error
    assert trace.answer_calls == 1


def test_unknown_topic(fig1_graph, provider, small_params, reason_cfg):
    with pytest.raises(NotFoundError):
        reason(QUESTION, 99, fig1_graph, provider, small_params, reason_cfg, ScriptedBackend())


def test_evidence_conditions_follow_the_selection(fig1_graph, provider, small_params, reason_cfg):
    backend = ScriptedBackend({QUESTION: [{"evidence_contains": ["Cyprus"], "reply": "FINAL: Greek"}]})
    cyprus, english = fig1_graph.entity_id("Cyprus"), fig1_graph.entity_id("English")
    answer, _ = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend,
                       OracleSelector({cyprus}, top_m=1))
    assert answer == "Greek"
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend,
                           OracleSelector({english}, top_m=1))
    assert answer == "unknown"
    assert trace.iterations[0].evidence == "(Knews, language, English)"


def test_text_mode_sends_the_whole_subgraph(fig1_graph, provider, reason_cfg):
    cfg = replace(reason_cfg, encoder=replace(reason_cfg.encoder, prompt_mode="text"))
    backend = ScriptedBackend({QUESTION: [{"evidence_contains": ["Cyprus", "English"], "reply": "FINAL: Greek"}]})
    answer, trace = reason(QUESTION, 0, fig1_graph, provider, None, cfg, backend)
    assert answer == "Greek"
    assert (trace.select_calls, trace.answer_calls) == (0, 1)
    assert account(trace).lightweight_calls == 0
    step = trace.iterations[0]
    assert step.selected == []
    assert len(step.evidence.splitlines()) == step.subgraph_edges == 3


def test_reasoning_is_deterministic(fig1_graph, provider, small_params, reason_cfg):
    backend = walking(("Knews", "NEXT: Cyprus"), ("Cyprus", "FINAL: Greek"))
    runs = [reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)[1] for _ in range(2)]
    first, second = ({k: v for k, v in t.summary().items() if k != "seconds"} for t in runs)
    assert first == second
    assert [it.evidence for it in runs[0].iterations] == [it.evidence for it in runs[1].iterations]


def test_call_accounting_under_random_replies():
    rng = np.random.default_rng(99)
    provider = HashEmbeddingProvider(8)
    encoder = EncoderConfig(layers=1, d_in=8, d_hidden=4, d_prompt=4)
    params = init_model_params(encoder)
    for _ in range(300):
        graph = random_graph(rng, int(rng.integers(2, 9)))
        cfg = ReasonConfig(ExtractionConfig(hops=1), encoder, max_iterations=int(rng.integers(1, 5)), top_m=2)
        backend = RandomBackend(rng, list(graph.entity_labels))
        answer, trace = reason("which node?", 0, graph, provider, params, cfg, backend)
        report = account(trace)
        assert 1 <= report.iterations <= cfg.max_iterations
        assert report.select_calls == report.iterations
        assert report.answer_calls == report.iterations
        assert report.reformat_calls <= report.iterations
        assert report.lightweight_calls + report.powerful_calls == len(trace.calls)
        assert (answer is not None) == (trace.terminal is Terminal.ANSWERED)
        assert len(set(trace.topics)) == len(trace.topics)


@pytest.mark.parametrize("reply, answer", [
    ("FINAL: Greek", "Greek"),
    ("final:Greek", "Greek"),
    ("Final :  Greek language  ", "Greek language"),
    ("The evidence suffices.\nFINAL: Greek\nNEXT: Cyprus", "Greek"),
])
def test_parse_final(reply, answer):
    decision = parse_decision(reply)
    assert decision.kind is DecisionKind.ANSWER
    assert decision.answer == answer


def test_parse_keeps_rationale():
    decision = parse_decision("Cyprus is missing its language.\nNEXT: Cyprus")
    assert decision.rationale == "Cyprus is missing its language."
    assert decision.next_label == "Cyprus"


@pytest.mark.parametrize("reply", ["NEXT: cyprus", "next: **Cyprus**.", 'NEXT: "Cyprus"', "NEXT:Cyprus"])
def test_parse_next_grounds_entity(reply, fig1_graph):
    decision = parse_decision(reply, fig1_graph)
    assert decision.kind is DecisionKind.CONTINUE
    assert decision.next_entity == fig1_graph.entity_id("Cyprus")
    assert decision.next_label == "Cyprus"


@pytest.mark.parametrize("reply", [None, "", "I am not sure.", "FINAL:", "NEXT:   ", "FINALLY we know: Greek"])
def test_parse_rejects(reply):
    with pytest.raises(DecisionParseError):
        parse_decision(reply)


def test_parse_next_outside_graph(fig1_graph):
    with pytest.raises(GroundingError):
        parse_decision("NEXT: Atlantis", fig1_graph)


def test_parse_against_generated_replies():
    rng = np.random.default_rng(5)
    chatter = ["", "Let me think.\n", "The triples mention Cyprus.\n", "Looking at the evidence: ", "ok "]
    values = ["Greek", "Nicosia", "SPP Media Group", "node 7", "a b c"]
    for _ in range(50):
        marker = str(rng.choice(["FINAL", "NEXT"]))
        marker = marker.lower() if rng.random() < 0.3 else marker
        value = str(rng.choice(values))
        prefix = str(rng.choice(chatter))
        reply = f"{prefix}{marker}{' ' if rng.random() < 0.2 else ''}:{' ' * int(rng.integers(0, 3))}{value}"
        decision = parse_decision(reply)
        assert decision.rationale == prefix.strip()
        if marker.upper() == "FINAL":
            assert (decision.kind, decision.answer) == (DecisionKind.ANSWER, value)
        else:
            assert (decision.kind, decision.next_label) == (DecisionKind.CONTINUE, value)


def test_templates_render():
    user = render("answer_user.txt", question="Who?", topic="Knews", evidence="(a, r, b)")
    assert user.startswith("Question: Who?\nTopic entity: Knews\nEvidence:\n(a, r, b)\n")
    assert "FINAL: <answer>" in render("answer_system.txt")
    assert "garbled" in render("reformat.txt", reply="garbled")


def test_script_file_round_trip(tmp_path):
    backend = walking(("Knews", "NEXT: Cyprus"))
    path = tmp_path / "script.json"
    backend.save(path)
    loaded = ScriptedBackend.load(path)
    assert loaded.script == backend.script
    assert loaded.default == "FINAL: unknown"


def test_http_chat_backend():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        assert request.headers["Authorization"] == "Bearer secret"
        return httpx.Response(200, json={"choices": [{"message": {"content": "FINAL: Greek"}}]})

    backend = HttpChatBackend("http://chat.local/v1/", "tiny", "secret",
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert backend.complete("system", "user") == "FINAL: Greek"
    assert backend.url == "http://chat.local/v1/chat/completions"
    assert seen[0]["temperature"] == 0
    assert [m["role"] for m in seen[0]["messages"]] == ["system", "user"]


def test_http_chat_backend_retries_then_fails():
    attempts = []

    def handler(request):
        attempts.append(1)
        return httpx.Response(503)

    backend = HttpChatBackend("http://chat.local/v1", "tiny", retries=1,
                              client=httpx.Client(transport=httpx.MockTransport(handler)))
    with pytest.raises(TransportError) as info:
        backend.complete("system", "user")
    assert len(attempts) == 2
    assert info.value.retries == 1


def test_backend_selection(monkeypatch):
    monkeypatch.delenv("GRASP_CHAT_URL", raising=False)
    assert isinstance(build_backend({"BACKEND": "scripted-mock"}), ScriptedBackend)
    with pytest.raises(ConfigurationError):
        build_backend({"BACKEND": "http-chat"})
    with pytest.raises(ConfigurationError):
        build_backend({"BACKEND": "carrier-pigeon"})
    backend = build_backend({"BACKEND": "http-chat", "CHAT_URL": "http://chat.local", "CHAT_MODEL": "tiny"})
    assert backend.model == "tiny"


def test_efficiency_table():
    reports = {
        1: [EfficiencyReport("a", 1, 1, 1, 0, 0.5), EfficiencyReport("b", 2, 2, 2, 1, 1.5)],
        2: [EfficiencyReport("a", 1, 1, 1, 0, 2.0)],
    }
    assert aggregate(reports[1]) == {"questions": 2, "lightweight_calls": 1.5, "powerful_calls": 2.0,
                                     "seconds": 1.0}
    assert aggregate([])["questions"] == 0
    table = efficiency_table(reports)
    assert table["columns"] == ["1-Hop", "2-Hop"]
    calls, seconds = table["rows"]
    assert calls == {"metric": "# LLM call", "values": {"1-Hop": "1.5+2.0", "2-Hop": "1.0+1.0"}}
    assert seconds["values"] == {"1-Hop": 1.0, "2-Hop": 2.0}
    named = efficiency_table({"Without Soft Prompt": reports[2], "Graph Soft Prompt": reports[1]})
    assert named["columns"] == ["Without Soft Prompt", "Graph Soft Prompt"]
    assert named["rows"][0]["values"]["Graph Soft Prompt"] == "1.5+2.0"


def test_traces_export_one_line_per_iteration(tmp_path, fig1_graph, provider, small_params, reason_cfg):
    backend = walking(("Knews", "NEXT: Cyprus"), ("Cyprus", "FINAL: Greek"))
    _, trace = reason(QUESTION, 0, fig1_graph, provider, small_params, reason_cfg, backend)
    path = tmp_path / "traces.jsonl"
    write_traces(path, [trace, trace])
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert [row["iteration"] for row in rows] == [0, 1, 0, 1]
    assert rows[1]["topic"] == "Cyprus"
    assert rows[0]["terminal"] == "answered"
    assert trace.to_dict()["answer"] == "Greek"


def test_reason_config_is_validated(small_encoder):
    with pytest.raises(ValidationError):
        ReasonConfig(ExtractionConfig(), small_encoder, max_iterations=0)
    with pytest.raises(ValidationError):
        ReasonConfig(ExtractionConfig(), small_encoder, top_m=0)
