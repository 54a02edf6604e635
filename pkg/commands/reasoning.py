import click

import runtime
from app import app
from commands.common import (backend_option, checkpoint_option, config_option, echo_json, grasp_errors,
                             graph_option, load_backend, load_graph, load_pipeline, load_provider, script_option,
                             seed_option)
from commands.graph import find_topic
from engine.bench import config_for_hops
from engine.orchestrator import reason, write_traces
from engine.selector import init_model_params


@app.cli.command('reason')
@click.option('--question', required=True)
@click.option('--topic', required=True, help='Topic entity label.')
@click.option('--max-iterations', type=int, default=None)
@click.option('--trace', 'trace_path', type=click.Path(dir_okay=False), default=None,
              help='Export the trace as JSON lines, one iteration per line.')
@click.option('--allow-untrained', is_flag=True, default=False)
@graph_option
@checkpoint_option
@backend_option
@script_option
@config_option
@seed_option
@grasp_errors
def reason_command(question, topic, max_iterations, trace_path, allow_untrained, graph_path, checkpoint_path,
                   backend_kind, script_path, config_path, seed):
    """Answer a question by iterative selection and answer-backend decisions."""
    pipeline = load_pipeline(config_path, SEED=seed, MAX_ITERATIONS=max_iterations)
    provider = load_provider(pipeline)
    graph = load_graph(graph_path)
    params = runtime.params(checkpoint_path, required=not allow_untrained)
    if params is None:
        params = init_model_params(pipeline.encoder, pipeline.seed)
    cfg = config_for_hops(pipeline.reasoning, int(params.meta.get("hops", pipeline.extraction.hops)), params)
    answer, trace = reason(question, find_topic(graph, topic), graph, provider, params, cfg,
                           load_backend(pipeline, backend_kind, script_path))
    if trace_path:
        write_traces(trace_path, [trace])
    echo_json({"answer": answer, **trace.summary()})
