"""Stage two: answer backends, the sufficiency decision and the iterative reasoning loop."""
from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Protocol

import httpx
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from engine.embedder import EmbeddingProvider
from engine.errors import (ConfigurationError, DecisionParseError, GraspError, GroundingError, NotFoundError,
                           TransportError, ValidationError)
from engine.gat import EncoderConfig, encode
from engine.kg_store import KnowledgeGraph
from engine.selector import DEFAULT_TOP_M, ModelSelector, Selector, build_bundle, verbalize, verbalize_subgraph
from engine.subgraph import ExtractionConfig, Subgraph, extract
from engine.tensor import ParameterStore

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
_templates = Environment(loader=FileSystemLoader(TEMPLATE_DIR), undefined=StrictUndefined, autoescape=False)

DECISION_MARKER = re.compile(r"\b(FINAL|NEXT)\s*:[ \t]*(.*)", re.IGNORECASE)
_USER_FIELDS = re.compile(r"^Question: (?P<question>.*)\nTopic entity: (?P<topic>.*)\nEvidence:\n"
                          r"(?P<evidence>.*?)\n\nReply with", re.DOTALL)


def render(template: str, **context) -> str:
    return _templates.get_template(template).render(**context)


class DecisionKind(str, Enum):
    ANSWER = "answer"
    CONTINUE = "continue"


class Terminal(str, Enum):
    ANSWERED = "answered"
    MAX_ITERATIONS = "max-iterations"
    STUCK = "stuck"
    ERROR = "error"


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    answer: str | None = None
    next_entity: int | None = None
    next_label: str | None = None
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "answer": self.answer, "next_entity": self.next_label,
                "rationale": self.rationale}


class AnswerBackend(Protocol):
    kind: str

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        ...


def _evidence_mentions(evidence: str, label: str) -> bool:
    return (f"({label}, " in evidence or f", {label})" in evidence
            or f"\n{label} (no incident relations retrieved)" in f"\n{evidence}")


class ScriptedBackend:
    """Deterministic mock answering from a script.

    The script maps question text to an ordered rule list; the first rule whose
    conditions hold supplies the reply. Conditions: "topic" (current topic label)
    and "evidence_contains" (labels that must all appear as triple endpoints).
    Reformat requests and unknown questions get `default`.
    """
    kind = "scripted-mock"

    def __init__(self, script: dict[str, list[dict]] | None = None, default: str = "FINAL: unknown"):
        self.script = script or {}
        self.default = default

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(payload.get("questions", {}), payload.get("default", "FINAL: unknown"))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"default": self.default, "questions": self.script}, fh, indent=1, ensure_ascii=False)

    @classmethod
    def answering(cls, answers: dict[str, str]) -> "ScriptedBackend":
        return cls({q: [{"reply": f"FINAL: {a}"}] for q, a in answers.items()})

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        fields = _USER_FIELDS.match(user_prompt)
        if not fields:
            return self.default
        for rule in self.script.get(fields["question"], []):
            if "topic" in rule and rule["topic"] != fields["topic"]:
                continue
            if not all(_evidence_mentions(fields["evidence"], label) for label in rule.get("evidence_contains", [])):
                continue
            return rule["reply"]
        return self.default


class HttpChatBackend:
    """OpenAI-compatible chat completions endpoint, temperature 0."""
    kind = "http-chat"

    def __init__(self, base_url: str, model: str, api_key: str | None = None, retries: int = 2,
                 timeout: float = 120.0, client: httpx.Client | None = None):
        if not base_url:
            raise ConfigurationError("http-chat backend needs CHAT_URL", "CHAT_URL")
        self.url = f"{base_url.rstrip('/')}/chat/completions"
        self.model = model
        self.api_key = api_key
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, retries: int = 2) -> "HttpChatBackend":
        return cls(os.environ.get("GRASP_CHAT_URL", ""), os.environ.get("GRASP_CHAT_MODEL", "gpt-4o"),
                   os.environ.get("GRASP_CHAT_KEY"), retries)

    def complete(self, system_prompt: str, user_prompt: str) -> str:
        payload = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(self.url, json=payload, headers=headers)
                response.raise_for_status()
                return response.json()["choices"][0]["message"]["content"] or ""
            except (httpx.HTTPError, ValueError, KeyError, IndexError, TypeError) as exc:
                last_error = exc
                logger.warning("chat request attempt %d failed: %s", attempt + 1, exc)
        raise TransportError(f"chat backend {self.url} failed: {last_error}", self.retries)


def build_backend(config, script_path: str | None = None):
    kind = config.get("BACKEND", "scripted-mock")
    if kind in ("scripted", ScriptedBackend.kind):
        return ScriptedBackend.load(script_path) if script_path else ScriptedBackend()
    if kind in ("http", HttpChatBackend.kind):
        return HttpChatBackend(config.get("CHAT_URL") or os.environ.get("GRASP_CHAT_URL", ""),
                               config.get("CHAT_MODEL") or os.environ.get("GRASP_CHAT_MODEL", "gpt-4o"),
                               config.get("CHAT_KEY") or os.environ.get("GRASP_CHAT_KEY"),
                               int(config.get("BACKEND_RETRIES", 2)))
    raise ConfigurationError(f"unknown answer backend {kind!r}", "BACKEND")


def _clean_label(value: str) -> str:
    return value.strip().strip("\"'`*").rstrip(".").strip()


def ground_entity(label: str, graph: KnowledgeGraph, subgraph: Subgraph | None = None) -> int:
    """Subgraph nodes first (exact, then case-insensitive), then the whole catalog."""
    if subgraph is not None:
        for node in subgraph.nodes:
            if node.label == label:
                return node.entity
        folded = label.casefold()
        for node in subgraph.nodes:
            if node.label.casefold() == folded:
                return node.entity
    entity = graph.find_entity(label)
    if entity is None:
        raise GroundingError(f"NEXT entity {label!r} is not in the graph")
    return entity


def parse_decision(raw: str | None, graph: KnowledgeGraph | None = None,
                   subgraph: Subgraph | None = None) -> Decision:
    """Read the first `FINAL: <answer>` or `NEXT: <entity label>` marker, ignoring leading chatter."""
    text = raw if isinstance(raw, str) else ""
    match = DECISION_MARKER.search(text)
    if not match:
        raise DecisionParseError(f"no FINAL/NEXT marker in reply {text[:80]!r}")
    rationale = text[:match.start()].strip()
    value = match.group(2).strip()
    if match.group(1).upper() == "FINAL":
        if not value:
            raise DecisionParseError("FINAL marker without an answer")
        return Decision(DecisionKind.ANSWER, answer=value, rationale=rationale)
    label = _clean_label(value)
    if not label:
        raise DecisionParseError("NEXT marker without an entity label")
    if graph is None:
        return Decision(DecisionKind.CONTINUE, next_label=label, rationale=rationale)
    entity = ground_entity(label, graph, subgraph)
    return Decision(DecisionKind.CONTINUE, next_entity=entity, next_label=graph.label(entity), rationale=rationale)


@dataclass(frozen=True)
class ReasonConfig:
    extraction: ExtractionConfig = ExtractionConfig()
    encoder: EncoderConfig = EncoderConfig()
    max_iterations: int = 4
    top_m: int = DEFAULT_TOP_M

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError(f"max iterations must be at least 1, got {self.max_iterations}")
        if self.top_m < 1:
            raise ValidationError(f"selection size must be at least 1, got {self.top_m}")


@dataclass
class CallRecord:
    kind: str
    seconds: float


@dataclass
class Iteration:
    topic: str
    subgraph_nodes: int
    subgraph_edges: int
    selected: list[str]
    evidence: str
    decision: dict | None = None
    seconds: float = 0.0


@dataclass
class ReasoningTrace:
    question: str
    iterations: list[Iteration] = field(default_factory=list)
    calls: list[CallRecord] = field(default_factory=list)
    terminal: Terminal | None = None
    answer: str | None = None
    error: str | None = None

    def _count(self, kind: str) -> int:
        return sum(1 for call in self.calls if call.kind == kind)

    @property
    def select_calls(self) -> int:
        return self._count("select")

    @property
    def answer_calls(self) -> int:
        return self._count("answer")

    @property
    def reformat_calls(self) -> int:
        return self._count("reformat")

    @property
    def seconds(self) -> float:
        return sum(it.seconds for it in self.iterations)

    @property
    def topics(self) -> list[str]:
        return [it.topic for it in self.iterations]

    def summary(self) -> dict:
        return {
            "terminal": self.terminal.value if self.terminal else None,
            "iterations": len(self.iterations),
            "topics": self.topics,
            "select_calls": self.select_calls,
            "answer_calls": self.answer_calls,
            "reformat_calls": self.reformat_calls,
            "seconds": round(self.seconds, 6),
            "error": self.error,
        }

    def to_dict(self) -> dict:
        return {"question": self.question, "answer": self.answer, **self.summary(),
                "steps": [asdict(it) for it in self.iterations]}

    def jsonl_lines(self) -> list[str]:
        terminal = self.terminal.value if self.terminal else None
        return [
            json.dumps({"question": self.question, "iteration": i, "terminal": terminal, **asdict(it)},
                       ensure_ascii=False)
            for i, it in enumerate(self.iterations)
        ]


def write_traces(path: str | Path, traces: Iterable[ReasoningTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            for line in trace.jsonl_lines():
                fh.write(line + "\n")


def _call(backend: AnswerBackend, system: str, user: str, kind: str, trace: ReasoningTrace) -> str:
    started = time.perf_counter()
    try:
        return backend.complete(system, user)
    finally:
        trace.calls.append(CallRecord(kind, time.perf_counter() - started))


def reason(question: str, topic: int, graph: KnowledgeGraph, provider: EmbeddingProvider,
           params: ParameterStore, cfg: ReasonConfig, backend: AnswerBackend,
           selector: Selector | None = None) -> tuple[str | None, ReasoningTrace]:
    if not graph.has_entity(topic):
        raise NotFoundError(f"topic entity {topic} not in graph")
    selector = selector or ModelSelector(params, cfg.top_m)
    system = render("answer_system.txt")
    trace = ReasoningTrace(question)
    visited = set()
    current = topic

    while True:
        if len(trace.iterations) >= cfg.max_iterations:
            trace.terminal = Terminal.MAX_ITERATIONS
            break
        visited.add(current)
        started = time.perf_counter()
        subgraph = extract(graph, provider, question, current, cfg.extraction)
        if cfg.encoder.prompt_mode == "text":
            selected, evidence = [], verbalize_subgraph(subgraph)
        else:
            bundle = build_bundle(subgraph, question, encode(subgraph, question, provider, params, cfg.encoder),
                                  provider)
            select_started = time.perf_counter()
            selection = selector(bundle)
            trace.calls.append(CallRecord("select", time.perf_counter() - select_started))
            selected, evidence = [graph.label(e) for e in selection.selected], verbalize(selection, subgraph)
        step = Iteration(graph.label(current), len(subgraph), len(subgraph.edges), selected, evidence)
        trace.iterations.append(step)
        user = render("answer_user.txt", question=question, topic=graph.label(current), evidence=evidence)

        try:
            reply = _call(backend, system, user, "answer", trace)
            try:
                decision = parse_decision(reply, graph, subgraph)
            except DecisionParseError:
                logger.info("unparseable reply, asking for a reformat")
                reply = _call(backend, system, render("reformat.txt", reply=reply), "reformat", trace)
                decision = parse_decision(reply, graph, subgraph)
        except GroundingError as exc:
            trace.terminal, trace.error = Terminal.STUCK, exc.message
        except GraspError as exc:
            trace.terminal, trace.error = Terminal.ERROR, exc.message
        else:
            step.decision = decision.to_dict()
        step.seconds = time.perf_counter() - started
        if trace.terminal is not None:
            break

        if decision.kind is DecisionKind.ANSWER:
            trace.answer = decision.answer
            trace.terminal = Terminal.ANSWERED
            break
        if decision.next_entity in visited:
            trace.terminal = Terminal.STUCK
            trace.error = f"topic {decision.next_label!r} repeated"
            break
        current = decision.next_entity

    logger.debug("reason %r: %s after %d iterations", question, trace.terminal.value, len(trace.iterations))
    return trace.answer, trace


@dataclass(frozen=True)
class EfficiencyReport:
    question: str
    iterations: int
    select_calls: int
    answer_calls: int
    reformat_calls: int
    seconds: float

    @property
    def lightweight_calls(self) -> int:
        return self.select_calls

    @property
    def powerful_calls(self) -> int:
        return self.answer_calls + self.reformat_calls


def account(trace: ReasoningTrace) -> EfficiencyReport:
    return EfficiencyReport(trace.question, len(trace.iterations), trace.select_calls, trace.answer_calls,
                            trace.reformat_calls, trace.seconds)


def aggregate(reports: list[EfficiencyReport]) -> dict:
    if not reports:
        return {"questions": 0, "lightweight_calls": 0.0, "powerful_calls": 0.0, "seconds": 0.0}
    n = len(reports)
    return {
        "questions": n,
        "lightweight_calls": sum(r.lightweight_calls for r in reports) / n,
        "powerful_calls": sum(r.powerful_calls for r in reports) / n,
        "seconds": sum(r.seconds for r in reports) / n,
    }


def efficiency_table(reports_by_setting: dict[int | str, list[EfficiencyReport]]) -> dict:
    """Mean calls (lightweight + powerful) and run time, one column per setting.

    Integer keys are hop counts and become "N-Hop" columns; string keys are used as given, in insertion order.
    """
    keys = list(reports_by_setting)
    if all(isinstance(k, int) for k in keys):
        keys.sort()
    columns = [f"{k}-Hop" if isinstance(k, int) else k for k in keys]
    means = {c: aggregate(reports_by_setting[k]) for c, k in zip(columns, keys)}
    return {
        "columns": columns,
        "rows": [
            {"metric": "# LLM call",
             "values": {c: f"{means[c]['lightweight_calls']:.1f}+{means[c]['powerful_calls']:.1f}" for c in columns}},
            {"metric": "Run time (s)", "values": {c: round(means[c]["seconds"], 4) for c in columns}},
        ],
        "means": means,
    }
