import functools
import json

import click
from flask import current_app

import runtime
from engine.config import PipelineConfig
from engine.embedder import build_provider
from engine.errors import GraspError
from engine.kg_store import ingest
from engine.orchestrator import build_backend


def grasp_errors(func):
    """Turn engine errors into a clean nonzero exit."""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except GraspError as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc.message}")
    return wrapper


seed_option = click.option('--seed', type=int, default=None, help='Seed for every random draw.')
config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             default=None, help='Pipeline settings file (KEY = value lines).')
graph_option = click.option('--graph', 'graph_path', type=click.Path(exists=True, dir_okay=False),
                            default=None, help='Triple file; defaults to GRAPH_PATH.')
checkpoint_option = click.option('--checkpoint', 'checkpoint_path', type=click.Path(), default=None,
                                 help='Parameter checkpoint; defaults to CHECKPOINT_PATH.')


def load_pipeline(config_path=None, **overrides):
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if config_path:
        return PipelineConfig.from_pyfile(config_path, **overrides)
    return runtime.pipeline(**overrides)


def load_provider(pipeline):
    return build_provider(pipeline.settings)


def load_graph(graph_path=None):
    if graph_path:
        return ingest(graph_path)
    return runtime.graph()


def echo_json(payload):
    click.echo(json.dumps(payload, indent=1, ensure_ascii=False))


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, ensure_ascii=False)


backend_option = click.option('--backend', 'backend_kind', type=click.Choice(['scripted-mock', 'http-chat']),
                              default=None, help='Answer backend; defaults to BACKEND.')
script_option = click.option('--script', 'script_path', type=click.Path(exists=True, dir_okay=False),
                             default=None, help='Scripted backend rules (JSON).')


def load_backend(pipeline, backend_kind=None, script_path=None):
    settings = {**pipeline.settings, "BACKEND": backend_kind or pipeline.settings["BACKEND"]}
    return build_backend(settings, script_path or current_app.config.get("SCRIPT_PATH"))
