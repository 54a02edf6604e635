import click

import runtime
from app import app
from commands.common import (checkpoint_option, config_option, echo_json, grasp_errors, graph_option,
                             load_graph, load_pipeline, load_provider, seed_option, write_json)
from engine.bench import config_for_hops
from engine.errors import NotFoundError
from engine.gat import dump_attention
from engine.kg_store import ingest
from engine.selector import init_model_params
from engine.subgraph import extract


@app.cli.command('ingest')
@click.argument('source', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='Write the canonical triple file here.')
@grasp_errors
def ingest_command(source, out):
    """Load a tab-separated triple file and print graph statistics."""
    graph = ingest(source)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(graph.serialize())
    echo_json(graph.stats())


def find_topic(graph, label):
    entity = graph.find_entity(label)
    if entity is None:
        raise NotFoundError(f"topic entity {label!r} not found")
    return entity


@app.cli.command('extract')
@click.option('--question', required=True)
@click.option('--topic', required=True, help='Topic entity label.')
@click.option('--hops', type=int, default=None)
@click.option('--k1', type=int, default=None)
@click.option('--k2', type=int, default=None)
@click.option('--dump-attention', 'attention_path', type=click.Path(dir_okay=False), default=None,
              help='Write per-layer attention matrices as JSON.')
@graph_option
@checkpoint_option
@config_option
@seed_option
@grasp_errors
def extract_command(question, topic, hops, k1, k2, attention_path, graph_path, checkpoint_path, config_path, seed):
    """Extract the question-relevant subgraph around a topic entity."""
    params = runtime.params(checkpoint_path, required=False) if attention_path else None
    if hops is None and params is not None:
        hops = params.meta.get("hops")
    pipeline = load_pipeline(config_path, HOPS=hops, K1=k1, K2=k2, SEED=seed)
    provider = load_provider(pipeline)
    graph = load_graph(graph_path)
    subgraph = extract(graph, provider, question, find_topic(graph, topic), pipeline.extraction)
    echo_json(subgraph.to_dict())
    if attention_path:
        if params is None:
            app.logger.warning("no checkpoint found; attention comes from freshly initialised weights")
            params = init_model_params(pipeline.encoder, pipeline.seed)
        encoder = config_for_hops(pipeline.reasoning, subgraph.hops, params).encoder
        attentions = dump_attention(subgraph, question, provider, params, encoder)
        write_json(attention_path, [a.to_dict(subgraph.labels) for a in attentions])
