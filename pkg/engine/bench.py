"""Synthetic benchmark generation and the evaluation harness built on top of `reason`."""
from __future__ import annotations

import csv
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from engine.embedder import EmbeddingProvider
from engine.errors import GenerationError, GraspError, MissingCheckpointError, NotFoundError, UnlabelableError, \
    ValidationError
from engine.gat import PROMPT_MODES, EncoderConfig
from engine.kg_store import KnowledgeGraph, PerturbationSpec, Scope, perturb, removed_edges, write_triples
from engine.orchestrator import ReasonConfig, ReasoningTrace, ScriptedBackend, account, efficiency_table, reason
from engine.selector import DatasetRecord, ModelSelector, OracleSelector, build_labels, init_model_params, \
    train, write_dataset
from engine.tensor import ParameterStore

logger = logging.getLogger(__name__)

TYPE_WORDS = ("city", "company", "person", "river", "film", "band", "island", "school",
              "museum", "language", "team", "country", "festival", "ship", "novel", "planet")
VERBS = ("owned", "located", "founded", "operated", "named", "led", "built", "managed", "hosted", "funded",
         "written", "played", "studied", "governed", "visited", "produced", "designed", "supported")
PREPOSITIONS = ("by", "in", "at", "for", "with", "near", "from", "under")
SYLLABLES = ("ka", "lo", "mi", "ra", "to", "ve", "su", "ne", "pa", "di", "zo", "ri", "fa", "gu", "be",
             "sha", "mo", "te", "li", "no", "ha", "yu", "xi", "po", "ce", "du", "wa", "je", "qu", "ti")
GENERIC_RELATION = "related to"


@dataclass(frozen=True)
class SyntheticSpec:
    num_entities: int = 2000
    num_relations: int = 24
    questions: dict = field(default_factory=lambda: {2: 300})
    distractor_density: float = 3.0
    type_count: int = 8
    bridge_redundancy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        questions = {int(depth): int(n) for depth, n in self.questions.items()}
        object.__setattr__(self, "questions", questions)
        if any(depth not in (1, 2, 3) for depth in questions):
            raise ValidationError(f"question depths must be 1, 2 or 3, got {sorted(questions)}")
        if any(n < 0 for n in questions.values()):
            raise ValidationError("question counts must be non-negative")
        if not 1 <= self.type_count <= len(TYPE_WORDS):
            raise ValidationError(f"type count must be in [1, {len(TYPE_WORDS)}], got {self.type_count}")
        if not self.type_count <= self.num_relations <= len(VERBS) * len(PREPOSITIONS):
            raise ValidationError(f"relation vocabulary must hold between {self.type_count} and "
                                  f"{len(VERBS) * len(PREPOSITIONS)} relations, got {self.num_relations}")
        if self.distractor_density < 0:
            raise ValidationError("distractor density must be non-negative")
        if not 0.0 <= self.bridge_redundancy <= 1.0:
            raise ValidationError("bridge redundancy must be in [0, 1]")
        if self.num_entities < 2:
            raise ValidationError("a benchmark needs at least two entities")

    def to_dict(self) -> dict:
        return {"num_entities": self.num_entities, "num_relations": self.num_relations,
                "questions": {str(d): n for d, n in sorted(self.questions.items())},
                "distractor_density": self.distractor_density, "type_count": self.type_count,
                "bridge_redundancy": self.bridge_redundancy, "seed": self.seed}


STANDARD_SPEC = SyntheticSpec()
MISSING_EDGE_SPEC = SyntheticSpec(questions={1: 60, 2: 180, 3: 60}, bridge_redundancy=1.0)


@dataclass(frozen=True)
class PlantedPath:
    """topic -> bridges... -> answer, as entity labels and relation labels."""
    entities: tuple[str, ...]
    relations: tuple[str, ...]

    @property
    def depth(self) -> int:
        return len(self.relations)

    @property
    def topic(self) -> str:
        return self.entities[0]

    @property
    def answer(self) -> str:
        return self.entities[-1]

    @property
    def bridges(self) -> tuple[str, ...]:
        return self.entities[1:-1]


@dataclass
class SyntheticBenchmark:
    spec: SyntheticSpec
    rows: list[tuple[str, str, str]]
    records: list[DatasetRecord]
    paths: list[PlantedPath]
    backend: ScriptedBackend

    @property
    def graph(self) -> KnowledgeGraph:
        return KnowledgeGraph.from_labeled(self.rows)

    def write(self, directory: str | Path) -> dict[str, str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {"graph": directory / "graph.tsv", "dataset": directory / "dataset.jsonl",
                 "script": directory / "script.json", "spec": directory / "spec.json"}
        write_triples(files["graph"], self.rows)
        write_dataset(files["dataset"], self.records)
        self.backend.save(files["script"])
        files["spec"].write_text(json.dumps(self.spec.to_dict(), indent=1), encoding="utf-8")
        return {name: str(path) for name, path in files.items()}


def _entity_labels(spec: SyntheticSpec, rng: np.random.Generator) -> list[str]:
    names = set()
    labels = []
    while len(labels) < spec.num_entities:
        parts = rng.choice(len(SYLLABLES), size=int(rng.integers(2, 5)))
        name = "".join(SYLLABLES[i] for i in parts).capitalize()
        if name in names:
            continue
        names.add(name)
        labels.append(f"{TYPE_WORDS[len(labels) % spec.type_count]} {name}")
    return labels


def _relations(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[str, int, int]]:
    """(label, head type, tail type); every type gets at least one outgoing relation."""
    vocabulary = [f"{verb} {prep}" for verb in VERBS for prep in PREPOSITIONS]
    chosen = rng.choice(len(vocabulary), size=spec.num_relations, replace=False)
    return [(vocabulary[v], i % spec.type_count, int(rng.integers(spec.type_count)))
            for i, v in enumerate(chosen)]


def _question(path: PlantedPath, types: list[str]) -> str:
    parts = [path.topic, path.relations[0]]
    for relation, kind in zip(path.relations[1:], types[1:-1]):
        parts += ["a", kind, "that", relation]
    parts += ["which", f"{types[-1]}?"]
    return " ".join(parts)


def _script_rules(path: PlantedPath) -> list[dict]:
    final = f"FINAL: {path.answer}"
    if path.depth == 1:
        return [{"evidence_contains": [path.answer], "reply": final}]
    if path.depth == 2:
        return [{"evidence_contains": [path.bridges[0]], "reply": final}]
    return [{"evidence_contains": [path.bridges[1]], "reply": final},
            {"evidence_contains": [path.bridges[0]], "reply": f"NEXT: {path.bridges[0]}"}]


def generate(spec: SyntheticSpec | None = None) -> SyntheticBenchmark:
    """Plant one fresh typed path per question, then add typed distractor edges.

    The scripted backend answers correctly exactly when the gold bridge (the answer itself
    for one-hop questions) shows up as a triple endpoint in the evidence it is shown.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    labels = _entity_labels(spec, rng)
    relations = _relations(spec, rng)
    type_of = [i % spec.type_count for i in range(len(labels))]
    by_head_type = {t: [r for r, (_, head, _) in enumerate(relations) if head == t] for t in range(spec.type_count)}

    unused = {t: [int(i) for i in rng.permutation([e for e in range(len(labels)) if type_of[e] == t])]
              for t in range(spec.type_count)}

    def fresh(kind: int) -> int:
        if not unused[kind]:
            raise GenerationError(f"not enough {TYPE_WORDS[kind]} entities to plant every path; "
                                  "raise num_entities or lower the question counts")
        return unused[kind].pop()

    edges: set[tuple[int, int, int]] = set()
    reserved: set[tuple[int, int]] = set()
    path_of: dict[int, int] = {}
    generic = len(relations)
    paths, records, script = [], [], {}

    for depth in sorted(spec.questions):
        for n in range(spec.questions[depth]):
            chain = [int(rng.choice(len(relations)))]
            for _ in range(depth - 1):
                chain.append(int(rng.choice(by_head_type[relations[chain[-1]][2]])))
            entities = [fresh(relations[chain[0]][1])] + [fresh(relations[r][2]) for r in chain]
            for e in entities:
                path_of[e] = len(paths)
            for head, r, tail in zip(entities, chain, entities[1:]):
                edges.add((head, r, tail))
                reserved.add((head, r))
            if depth > 1 and rng.random() < spec.bridge_redundancy:
                middle = fresh(int(rng.integers(spec.type_count)))
                path_of[middle] = len(paths)
                edges.update({(entities[0], generic, middle), (middle, generic, entities[1])})

            path = PlantedPath(tuple(labels[e] for e in entities), tuple(relations[r][0] for r in chain))
            question = _question(path, [TYPE_WORDS[type_of[e]] for e in entities])
            paths.append(path)
            records.append(DatasetRecord(question, path.topic, (path.answer,), f"d{depth}-{n:04d}", depth))
            script[question] = _script_rules(path)

    members = {t: [e for e in range(len(labels)) if type_of[e] == t] for t in range(spec.type_count)}
    wanted = int(round(spec.distractor_density * spec.num_entities))
    added, attempts = 0, 0
    while added < wanted and attempts < 20 * wanted:
        attempts += 1
        r = int(rng.integers(len(relations)))
        _, head_type, tail_type = relations[r]
        head = members[head_type][int(rng.integers(len(members[head_type])))]
        tail = members[tail_type][int(rng.integers(len(members[tail_type])))]
        same_path = head in path_of and path_of.get(tail) == path_of[head]
        if head == tail or same_path or (head, r) in reserved or (head, r, tail) in edges:
            continue
        edges.add((head, r, tail))
        added += 1
    if added < wanted:
        logger.warning("placed %d of %d distractor edges", added, wanted)

    relation_labels = [label for label, _, _ in relations] + [GENERIC_RELATION]
    rows = [(labels[h], relation_labels[r], labels[t]) for h, r, t in sorted(edges)]
    logger.info("generated %d triples, %d questions (seed %d)", len(rows), len(records), spec.seed)
    return SyntheticBenchmark(spec, rows, records, paths, ScriptedBackend(script))


_PUNCTUATION = re.compile(r"[^\w\s]")


def normalize_answer(text: str | None) -> str:
    """Casefold, strip punctuation, collapse whitespace."""
    if not text:
        return ""
    return " ".join(_PUNCTUATION.sub("", text.casefold()).split())


@dataclass
class EvalRecord:
    question_id: str
    depth: int | None
    predicted: str | None
    gold: tuple[str, ...]
    hit: bool
    trace: dict

    def to_dict(self) -> dict:
        return {"question_id": self.question_id, "depth": self.depth, "predicted": self.predicted,
                "gold": list(self.gold), "hit": self.hit, "trace": self.trace}


@dataclass
class Evaluation:
    records: list[EvalRecord]
    traces: list[ReasoningTrace]
    metrics: dict


def is_hit(predicted: str | None, gold: Iterable[str], graph: KnowledgeGraph | None = None,
           match: str = "text") -> bool:
    if predicted is None:
        return False
    if match == "entity-id":
        if graph is None:
            raise ValidationError("entity-id matching needs the graph")
        found = graph.find_entity(predicted.strip())
        return found is not None and any(graph.find_entity(g) == found for g in gold)
    if match != "text":
        raise ValidationError(f"unknown answer matching mode {match!r}")
    normalized = normalize_answer(predicted)
    return any(normalized == normalize_answer(g) for g in gold)


def _oracle_label(graph: KnowledgeGraph, topic: int, record: DatasetRecord) -> frozenset[int]:
    answers = [a for a in (graph.find_entity(x) for x in record.answers) if a is not None]
    try:
        return build_labels(graph, topic, answers).entities
    except UnlabelableError:
        return frozenset()


def _summarize(metrics_records: list[EvalRecord], traces: list[ReasoningTrace]) -> dict:
    n = len(metrics_records)
    per_depth = {}
    for depth in sorted({r.depth for r in metrics_records if r.depth is not None}):
        subset = [r for r in metrics_records if r.depth == depth]
        per_depth[str(depth)] = {"questions": len(subset), "hits_at_1": sum(r.hit for r in subset) / len(subset)}
    terminals = {}
    for trace in traces:
        key = trace.terminal.value if trace.terminal else "error"
        terminals[key] = terminals.get(key, 0) + 1
    reports = [account(t) for t in traces]
    return {
        "questions": n,
        "hits_at_1": sum(r.hit for r in metrics_records) / n if n else 0.0,
        "per_depth": per_depth,
        "mean_select_calls": sum(r.select_calls for r in reports) / n if n else 0.0,
        "mean_answer_calls": sum(r.answer_calls for r in reports) / n if n else 0.0,
        "mean_reformat_calls": sum(r.reformat_calls for r in reports) / n if n else 0.0,
        "mean_iterations": sum(r.iterations for r in reports) / n if n else 0.0,
        "mean_seconds": sum(r.seconds for r in reports) / n if n else 0.0,
        "terminals": dict(sorted(terminals.items())),
    }


def evaluate(dataset: list[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
             params: ParameterStore | None, cfg: ReasonConfig, backend, *, selector: str = "model",
             allow_untrained: bool = False, match: str = "text", workers: int = 1, seed: int = 0,
             label_graph: KnowledgeGraph | None = None) -> Evaluation:
    """Run `reason` on every record and score Hits@1.

    `label_graph` is where oracle labels are computed; it defaults to the evaluation graph.
    """
    if selector not in ("model", "oracle"):
        raise ValidationError(f"unknown selector mode {selector!r}")
    text_mode = cfg.encoder.prompt_mode == "text"
    if params is None and not text_mode:
        if not allow_untrained:
            raise MissingCheckpointError(["selector parameters"])
        logger.warning("evaluating with untrained parameters")
        params = init_model_params(cfg.encoder, seed)
    label_graph = label_graph or graph

    def run(record: DatasetRecord) -> tuple[EvalRecord, ReasoningTrace]:
        trace = ReasoningTrace(record.question)
        try:
            topic = graph.entity_id(record.topic_entity)
            chooser = None
            if not text_mode:
                chooser = (OracleSelector(_oracle_label(label_graph, topic, record), cfg.top_m)
                           if selector == "oracle" else ModelSelector(params, cfg.top_m))
            predicted, trace = reason(record.question, topic, graph, provider, params, cfg, backend, chooser)
        except GraspError as exc:
            logger.debug("%s failed: %s", record.id, exc.message)
            predicted, trace.error = None, exc.message
        hit = is_hit(predicted, record.answers, graph, match)
        return EvalRecord(record.id, record.depth, predicted, record.answers, hit, trace.summary()), trace

    started = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, dataset))
    else:
        outcomes = [run(record) for record in dataset]
    records = [r for r, _ in outcomes]
    traces = [t for _, t in outcomes]
    metrics = _summarize(records, traces)
    logger.info("evaluated %d questions in %.1fs: hits@1=%.3f", len(records),
                time.perf_counter() - started, metrics["hits_at_1"])
    return Evaluation(records, traces, metrics)


@dataclass(frozen=True)
class SweepPoint:
    ratio: float
    removed_edges: int
    hits_at_1: float
    metrics: dict

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "removed_edges": self.removed_edges, "hits_at_1": self.hits_at_1}


DEFAULT_RATIOS = (0.05, 0.10, 0.15, 0.20, 0.25)


def sweep_incompleteness(dataset: list[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
                         params: ParameterStore | None, cfg: ReasonConfig, backend,
                         ratios: Iterable[float] = DEFAULT_RATIOS, seed: int = 0,
                         scope: Scope = Scope.TOPIC, **evaluate_options) -> list[SweepPoint]:
    """Evaluate on graphs with a growing, nested share of topic-entity edges removed."""
    ratios = list(ratios)
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise ValidationError(f"removal ratio must be in [0, 1], got {ratio}")
    topics = sorted(set(topic_ids(graph, dataset)))
    points = []
    for ratio in ratios:
        spec = PerturbationSpec(ratio, scope, seed)
        removed = len(removed_edges(graph, spec, topics)) if ratio else 0
        perturbed = perturb(graph, spec, topics) if ratio else graph
        result = evaluate(dataset, perturbed, provider, params, cfg, backend, **evaluate_options)
        points.append(SweepPoint(ratio, removed, result.metrics["hits_at_1"], result.metrics))
        logger.info("ratio %.2f: removed %d edges, hits@1=%.3f", ratio, removed, points[-1].hits_at_1)
    return points


def write_curve_csv(path: str | Path, curves: dict[str, list[SweepPoint]]) -> None:
    """One row per (configuration, ratio)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "ratio", "removed_edges", "hits_at_1"])
        for name, points in curves.items():
            for point in points:
                writer.writerow([name, f"{point.ratio:.2f}", point.removed_edges, f"{point.hits_at_1:.4f}"])


def config_for_hops(cfg: ReasonConfig, hops: int, params: ParameterStore | None = None) -> ReasonConfig:
    """Extraction at `hops`; a checkpoint fixes the encoder shape and caps the layer count."""
    encoder, layers = cfg.encoder, hops
    if params is not None and "encoder" in params.meta:
        encoder = EncoderConfig(**params.meta["encoder"])
        layers = min(hops, encoder.layers)
    return replace(cfg, extraction=replace(cfg.extraction, hops=hops), encoder=replace(encoder, layers=layers))


def hop_ablation(dataset: list[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
                 params_per_hop: dict[int, ParameterStore | None], cfg: ReasonConfig, backend,
                 hops: Iterable[int] = (1, 2, 3), **evaluate_options) -> dict:
    hops = list(hops)
    missing = [f"hops={h}" for h in hops if params_per_hop.get(h) is None]
    if missing and not evaluate_options.get("allow_untrained"):
        raise MissingCheckpointError(missing)
    metrics, reports = {}, {}
    for h in hops:
        params = params_per_hop.get(h)
        result = evaluate(dataset, graph, provider, params, config_for_hops(cfg, h, params), backend,
                          **evaluate_options)
        metrics[f"{h}-Hop"] = result.metrics
        reports[h] = [account(t) for t in result.traces]
    efficiency = efficiency_table(reports)
    columns = efficiency["columns"]
    return {
        "columns": columns,
        "rows": [{"metric": "Hits@1", "values": {c: round(metrics[c]["hits_at_1"], 4) for c in columns}},
                 *efficiency["rows"]],
        "metrics": metrics,
    }


PROMPT_MODE_COLUMNS = {
    "graph": "Graph Soft Prompt",
    "none": "Without Soft Prompt",
    "triples": "Triplet-based Representation",
    "text": "Text-based Soft Prompt",
}


def config_for_mode(cfg: ReasonConfig, mode: str, params: ParameterStore | None = None) -> ReasonConfig:
    encoder = replace(cfg.encoder, prompt_mode=mode)
    if params is not None and "encoder" in params.meta:
        encoder = EncoderConfig(**params.meta["encoder"])
        if encoder.prompt_mode != mode:
            raise ValidationError(f"checkpoint was trained for prompt mode {encoder.prompt_mode!r}, not {mode!r}")
    return replace(cfg, encoder=encoder)


def prompt_ablation(dataset: list[DatasetRecord], graph: KnowledgeGraph, provider: EmbeddingProvider,
                    params_per_mode: dict[str, ParameterStore | None], cfg: ReasonConfig, backend,
                    modes: Iterable[str] = PROMPT_MODES, **evaluate_options) -> dict:
    """Hits@1 and call counts per soft-prompt variant at the configured hop count."""
    modes = list(modes)
    unknown = [m for m in modes if m not in PROMPT_MODES]
    if unknown:
        raise ValidationError(f"unknown prompt modes {unknown}")
    missing = [f"prompt_mode={m}" for m in modes if m != "text" and params_per_mode.get(m) is None]
    if missing and not evaluate_options.get("allow_untrained"):
        raise MissingCheckpointError(missing)
    metrics, reports = {}, {}
    for mode in modes:
        params = params_per_mode.get(mode)
        column = PROMPT_MODE_COLUMNS[mode]
        result = evaluate(dataset, graph, provider, params, config_for_mode(cfg, mode, params), backend,
                          **evaluate_options)
        metrics[column] = result.metrics
        reports[column] = [account(t) for t in result.traces]
    efficiency = efficiency_table(reports)
    columns = efficiency["columns"]
    return {
        "columns": columns,
        "rows": [{"metric": "Hits@1", "values": {c: round(metrics[c]["hits_at_1"], 4) for c in columns}},
                 *efficiency["rows"]],
        "metrics": metrics,
    }


@dataclass(frozen=True)
class AcceptanceBand:
    min_selection_top1: float = 0.95
    min_hits_at_1: float = 0.90
    monotone_tolerance: float = 0.02

    def check(self, outcome: dict) -> list[str]:
        """Names of the criteria `outcome` misses; empty when everything is inside the band."""
        misses = []
        selection = outcome.get("selection_top1")
        if selection is not None and selection < self.min_selection_top1:
            misses.append(f"held-out selection top-1 {selection:.3f} < {self.min_selection_top1}")
        hits = outcome.get("hits_at_1")
        if hits is not None and hits < self.min_hits_at_1:
            misses.append(f"pipeline hits@1 {hits:.3f} < {self.min_hits_at_1}")
        curves = outcome.get("curves", {})
        for name, values in curves.items():
            for before, after in zip(values, values[1:]):
                if after > before + self.monotone_tolerance:
                    misses.append(f"{name} curve rises from {before:.3f} to {after:.3f}")
                    break
        if "1-Hop" in curves and "2-Hop" in curves:
            drop = {name: curves[name][0] - curves[name][-1] for name in ("1-Hop", "2-Hop")}
            if not drop["2-Hop"] < drop["1-Hop"]:
                misses.append(f"2-hop drop {drop['2-Hop']:.3f} is not below 1-hop drop {drop['1-Hop']:.3f}")
        ablation = outcome.get("ablation")
        if ablation and ablation.get("2-Hop", 0.0) < ablation.get("1-Hop", 0.0):
            misses.append(f"2-hop hits@1 {ablation['2-Hop']:.3f} below 1-hop {ablation['1-Hop']:.3f}")
        return misses


def topic_ids(graph: KnowledgeGraph, dataset: Iterable[DatasetRecord]) -> list[int]:
    ids = []
    for record in dataset:
        try:
            ids.append(graph.entity_id(record.topic_entity))
        except NotFoundError:
            continue
    return ids


def train_for_hops(benchmark: SyntheticBenchmark, graph: KnowledgeGraph, provider: EmbeddingProvider,
                   pipeline, hops: int) -> tuple[ParameterStore, dict]:
    cfg = config_for_hops(pipeline.reasoning, hops)
    params = init_model_params(cfg.encoder, pipeline.seed)
    report = train(benchmark.records, graph, provider, params, cfg.extraction, cfg.encoder, pipeline.training)
    return params, report.to_dict()


def run_bench(pipeline, provider: EmbeddingProvider, out_dir: str | Path, seed: int = 0,
              standard: SyntheticSpec = STANDARD_SPEC, missing_edge: SyntheticSpec = MISSING_EDGE_SPEC,
              ratios: Iterable[float] = DEFAULT_RATIOS, ablation_ratio: float = 0.25) -> dict:
    """gen -> train -> eval on the standard set, then sweep and hop ablation on the missing-edge set."""
    out_dir = Path(out_dir)
    workers = pipeline.workers
    started = time.perf_counter()

    bench = generate(replace(standard, seed=seed))
    bench.write(out_dir / "standard")
    graph = bench.graph
    params, report = train_for_hops(bench, graph, provider, pipeline, 2)
    params.save(out_dir / "standard" / "params-2hop.json")
    result = evaluate(bench.records, graph, provider, params, config_for_hops(pipeline.reasoning, 2, params),
                      bench.backend, workers=workers)

    missing = generate(replace(missing_edge, seed=seed))
    missing.write(out_dir / "missing-edge")
    missing_graph = missing.graph
    per_hop = {}
    for hops in (1, 2, 3):
        per_hop[hops], _ = train_for_hops(missing, missing_graph, provider, pipeline, hops)
        per_hop[hops].save(out_dir / "missing-edge" / f"params-{hops}hop.json")

    curves = {}
    for hops in (1, 2):
        curves[f"{hops}-Hop"] = sweep_incompleteness(
            missing.records, missing_graph, provider, per_hop[hops],
            config_for_hops(pipeline.reasoning, hops, per_hop[hops]), missing.backend,
            ratios=(0.0, *ratios), seed=seed, workers=workers)
    write_curve_csv(out_dir / "incompleteness.csv", curves)

    perturbed = perturb(missing_graph, PerturbationSpec(ablation_ratio, Scope.TOPIC, seed),
                        topic_ids(missing_graph, missing.records))
    ablation = hop_ablation(missing.records, perturbed, provider, per_hop, pipeline.reasoning, missing.backend,
                            workers=workers)

    outcome = {
        "seed": seed,
        "selection_top1": report["heldout_hits"][-1] if report["heldout_hits"] else None,
        "hits_at_1": result.metrics["hits_at_1"],
        "training": report,
        "evaluation": result.metrics,
        "curves": {name: [p.hits_at_1 for p in points] for name, points in curves.items()},
        "ablation": {c: ablation["metrics"][c]["hits_at_1"] for c in ablation["columns"]},
        "ablation_table": {"columns": ablation["columns"], "rows": ablation["rows"]},
        "seconds": round(time.perf_counter() - started, 3),
    }
    (out_dir / "metrics.json").write_text(json.dumps(outcome, indent=1), encoding="utf-8")
    return outcome
