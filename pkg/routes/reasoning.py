from flask import request

import runtime
from app import app
from engine.errors import NotFoundError
from engine.gat import dump_attention, encode
from engine.orchestrator import reason
from engine.selector import build_bundle, init_model_params, score_candidates, verbalize
from engine.subgraph import extract


def _question_and_topic(data):
    if not data:
        return None, None, ({"error": "No input data provided"}, 400)
    question = data.get('question')
    topic = data.get('topic')
    if not question:
        return None, None, ({"error": "question is required"}, 400)
    if not topic:
        return None, None, ({"error": "topic is required"}, 400)
    graph = runtime.graph()
    entity = graph.find_entity(topic)
    if entity is None:
        raise NotFoundError(f"topic entity {topic!r} not found")
    return question, entity, None


def _params(data):
    store = runtime.params(required=not data.get('allow_untrained'))
    if store is None:
        app.logger.warning("serving with untrained selector parameters")
        store = init_model_params(runtime.pipeline().encoder, runtime.pipeline().seed)
    return store


@app.post('/extract')
def extract_subgraph():
    data = request.get_json(silent=True)
    question, topic, error = _question_and_topic(data)
    if error:
        return error
    cfg = runtime.reason_config(runtime.params(required=False))
    subgraph = extract(runtime.graph(), runtime.provider(), question, topic, cfg.extraction)
    payload = {"subgraph": subgraph.to_dict()}
    if data.get('dump_attention'):
        attentions = dump_attention(subgraph, question, runtime.provider(), _params(data), cfg.encoder)
        payload["attention"] = [a.to_dict(subgraph.labels) for a in attentions]
    return payload, 200


@app.post('/select')
def select_entities():
    data = request.get_json(silent=True)
    question, topic, error = _question_and_topic(data)
    if error:
        return error
    params = _params(data)
    cfg = runtime.reason_config(params)
    provider = runtime.provider()
    subgraph = extract(runtime.graph(), provider, question, topic, cfg.extraction)
    bundle = build_bundle(subgraph, question, encode(subgraph, question, provider, params, cfg.encoder), provider)
    result = score_candidates(bundle, params, int(data.get('top_m', cfg.top_m)))
    return {
        **result.to_dict(subgraph),
        "evidence": verbalize(result, subgraph)
    }, 200


@app.post('/reason')
def reason_question():
    data = request.get_json(silent=True)
    question, topic, error = _question_and_topic(data)
    if error:
        return error
    params = _params(data)
    answer, trace = reason(question, topic, runtime.graph(), runtime.provider(), params,
                           runtime.reason_config(params), runtime.backend())
    return {
        "answer": answer,
        "trace": trace.to_dict()
    }, 200
