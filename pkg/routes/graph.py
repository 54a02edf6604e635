from flask import request

import runtime
from app import app
from engine.errors import NotFoundError
from engine.kg_store import Direction, neighbors


@app.get('/graph/stats')
def graph_stats():
    return runtime.graph().stats(), 200


@app.get('/graph/neighbors/<path:label>')
def graph_neighbors(label):
    graph = runtime.graph()
    entity = graph.find_entity(label)
    if entity is None:
        raise NotFoundError(f"entity {label!r} not found")
    direction = request.args.get('direction', 'both')
    if direction not in {d.value for d in Direction}:
        return {"error": "direction must be out, in or both"}, 400
    return {
        "entity": graph.label(entity),
        "neighbors": [{
            "relation": graph.relation_label(r),
            "entity": graph.label(n),
            "direction": d.value
        } for r, n, d in neighbors(graph, entity, direction)]
    }, 200
