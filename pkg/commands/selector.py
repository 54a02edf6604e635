from dataclasses import replace

import click

import runtime
from app import app
from commands.common import (checkpoint_option, config_option, echo_json, grasp_errors, graph_option,
                             load_graph, load_pipeline, load_provider, seed_option)
from commands.graph import find_topic
from engine.bench import config_for_hops
from engine.gat import encode
from engine.selector import build_bundle, init_model_params, read_dataset, score_candidates, train, verbalize
from engine.subgraph import extract


@app.cli.command('train')
@click.argument('dataset', type=click.Path(exists=True, dir_okay=False))
@click.option('--out', type=click.Path(dir_okay=False), required=True, help='Where to save the trained parameters.')
@click.option('--hops', type=int, default=None)
@click.option('--epochs', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--freeze-head', is_flag=True, default=False, help='Train the encoder only.')
@click.option('--prompt-mode', type=click.Choice(['graph', 'none', 'triples']), default=None,
              help='Soft-prompt variant to train; text mode has no trainable selector.')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Start from this checkpoint instead of a fresh init.')
@click.option('--checkpoint-dir', type=click.Path(file_okay=False), default=None,
              help='Save one checkpoint per epoch here.')
@graph_option
@config_option
@seed_option
@grasp_errors
def train_command(dataset, out, hops, epochs, lr, freeze_head, prompt_mode, resume, checkpoint_dir, graph_path,
                  config_path, seed):
    """Train the graph encoder and selection head on a question dataset."""
    pipeline = load_pipeline(config_path, HOPS=hops, EPOCHS=epochs, LR=lr, SEED=seed,
                             FREEZE_HEAD=freeze_head or None, PROMPT_MODE=prompt_mode)
    provider = load_provider(pipeline)
    graph = load_graph(graph_path)
    params = init_model_params(pipeline.encoder, pipeline.seed)
    if resume:
        params.load_into(resume)
    training = pipeline.training
    if checkpoint_dir:
        training = replace(training, checkpoint_dir=checkpoint_dir)
    report = train(read_dataset(dataset), graph, provider, params, pipeline.extraction, pipeline.encoder, training)
    params.save(out)
    app.logger.info("saved parameters to %s", out)
    echo_json(report.to_dict())


@app.cli.command('select')
@click.option('--question', required=True)
@click.option('--topic', required=True, help='Topic entity label.')
@click.option('--top-m', type=int, default=None)
@graph_option
@checkpoint_option
@config_option
@seed_option
@grasp_errors
def select_command(question, topic, top_m, graph_path, checkpoint_path, config_path, seed):
    """Rank candidate entities for a question and print the verbalized evidence."""
    pipeline = load_pipeline(config_path, SEED=seed, SELECT_TOP_M=top_m)
    provider = load_provider(pipeline)
    graph = load_graph(graph_path)
    params = runtime.params(checkpoint_path)
    cfg = config_for_hops(pipeline.reasoning, int(params.meta.get("hops", pipeline.extraction.hops)), params)
    subgraph = extract(graph, provider, question, find_topic(graph, topic), cfg.extraction)
    bundle = build_bundle(subgraph, question, encode(subgraph, question, provider, params, cfg.encoder), provider)
    result = score_candidates(bundle, params, cfg.top_m)
    echo_json({**result.to_dict(subgraph), "evidence": verbalize(result, subgraph)})
