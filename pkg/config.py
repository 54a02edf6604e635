import os


class DefaultConfig:
    SQLALCHEMY_DATABASE_URI = os.environ.get("DATABASE_URL", "sqlite:///grasp.db")
    SQLALCHEMY_TRACK_MODIFICATIONS = False
    LOG_LEVEL = "INFO"

    # pipeline, anything left out falls back to engine.config.DEFAULTS
    EMBED_PROVIDER = "hash"
    EMBED_DIM = 64
    HOPS = 2
    K1 = 20
    K2 = 10
    SELECT_TOP_M = 3
    MAX_ITERATIONS = 4
    SEED = 0
    BACKEND = "scripted-mock"
    SCRIPT_PATH = None
    GRAPH_PATH = "data/graph.tsv"
    CHECKPOINT_PATH = "data/params.json"
    WORKERS = 1
