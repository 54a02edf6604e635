import os

os.environ.setdefault("GRASP_SQLALCHEMY_DATABASE_URI", "sqlite://")
os.environ.setdefault("GRASP_LOG_LEVEL", "WARNING")

import numpy as np
import pytest

import runtime
from app import app as flask_app, db
from engine.embedder import HashEmbeddingProvider
from engine.gat import EncoderConfig
from engine.kg_store import KnowledgeGraph, Triple, write_triples
from engine.orchestrator import ReasonConfig
from engine.selector import init_model_params
from engine.subgraph import ExtractionConfig

FIG1_ROWS = [
    ("Knews", "owned by", "SPP Media Group"),
    ("SPP Media Group", "operates in", "Cyprus"),
    ("Cyprus", "official language", "Greek"),
    ("Cyprus", "capital", "Nicosia"),
    ("Knews", "language", "English"),
]


@pytest.fixture
def fig1_rows():
    return list(FIG1_ROWS)


@pytest.fixture
def fig1_graph():
    return KnowledgeGraph.from_labeled(FIG1_ROWS)


@pytest.fixture
def fig1_path(tmp_path):
    path = tmp_path / "fig1.tsv"
    write_triples(path, FIG1_ROWS)
    return path


@pytest.fixture
def provider():
    return HashEmbeddingProvider(16)


@pytest.fixture
def small_encoder():
    return EncoderConfig(layers=2, d_in=16, d_hidden=8, d_prompt=8)


@pytest.fixture
def small_params(small_encoder):
    return init_model_params(small_encoder, seed=0)


@pytest.fixture
def reason_cfg(small_encoder):
    return ReasonConfig(ExtractionConfig(hops=2), small_encoder, max_iterations=4, top_m=3)


def random_graph(rng, n, relations=3, extra_edges=None):
    """A connected random graph: a random spanning chain plus extra edges."""
    order = rng.permutation(n)
    triples = {Triple(int(a), int(rng.integers(relations)), int(b)) for a, b in zip(order, order[1:])}
    for _ in range(n if extra_edges is None else extra_edges):
        a, b = rng.choice(n, size=2, replace=False)
        triples.add(Triple(int(a), int(rng.integers(relations)), int(b)))
    return KnowledgeGraph([f"node {i}" for i in range(n)], [f"rel {r}" for r in range(relations)], triples)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def app(tmp_path, fig1_path):
    flask_app.config.update(
        TESTING=True,
        GRAPH_PATH=str(fig1_path),
        CHECKPOINT_PATH=str(tmp_path / "params.json"),
        EMBED_DIM=16,
        D_HIDDEN=8,
        D_PROMPT=8,
        SCRIPT_PATH=None,
    )
    with flask_app.app_context():
        runtime.reset()
        db.create_all()
        yield flask_app
        db.session.remove()
        db.drop_all()
        runtime.reset()


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()
