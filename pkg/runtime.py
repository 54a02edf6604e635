"""Engine objects shared by the HTTP routes and the CLI, cached on `app.extensions`."""
import os

from flask import current_app

from engine.bench import config_for_hops
from engine.config import PipelineConfig
from engine.embedder import build_provider
from engine.errors import ConfigurationError, MissingCheckpointError
from engine.kg_store import ingest
from engine.orchestrator import ScriptedBackend, build_backend
from engine.tensor import ParameterStore


def _cache():
    return current_app.extensions.setdefault("grasp", {})


def pipeline(**overrides):
    if overrides:
        return PipelineConfig.from_mapping(current_app.config, **overrides)
    cache = _cache()
    if "pipeline" not in cache:
        cache["pipeline"] = PipelineConfig.from_mapping(current_app.config)
    return cache["pipeline"]


def graph(path=None):
    path = path or current_app.config.get("GRAPH_PATH")
    if not path:
        raise ConfigurationError("no knowledge graph configured", "GRAPH_PATH")
    graphs = _cache().setdefault("graphs", {})
    if path not in graphs:
        current_app.logger.info("loading knowledge graph from %s", path)
        graphs[path] = ingest(path)
    return graphs[path]


def provider():
    cache = _cache()
    if "provider" not in cache:
        cache["provider"] = build_provider(current_app.config)
    return cache["provider"]


def params(path=None, required=True):
    path = path or current_app.config.get("CHECKPOINT_PATH")
    if not path or not os.path.exists(path):
        if required:
            raise MissingCheckpointError([path or "CHECKPOINT_PATH"])
        return None
    stores = _cache().setdefault("params", {})
    if path not in stores:
        stores[path] = ParameterStore.load(path)
    return stores[path]


def backend(script_path=None):
    script_path = script_path or current_app.config.get("SCRIPT_PATH")
    if not script_path and current_app.config.get("BACKEND", "scripted-mock") in ("scripted", ScriptedBackend.kind):
        return ScriptedBackend()
    return build_backend(current_app.config, script_path)


def reset():
    current_app.extensions.pop("grasp", None)


def reason_config(store=None):
    """Reasoning settings, with hops and encoder shape taken from the checkpoint when there is one."""
    cfg = pipeline().reasoning
    if store is None:
        return cfg
    return config_for_hops(cfg, int(store.meta.get("hops", cfg.extraction.hops)), store)
