"""Pipeline settings: one flat mapping of uppercase keys turned into the engine's config objects."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from flask import Config

from engine.errors import ConfigurationError, GraspError
from engine.gat import EncoderConfig
from engine.orchestrator import ReasonConfig
from engine.selector import DEFAULT_TOP_M, TrainingConfig
from engine.subgraph import ExtractionConfig
from engine.tensor import OptimizerConfig

DEFAULTS = {
    "EMBED_PROVIDER": "hash",
    "EMBED_DIM": 64,
    "EMBED_TABLE": None,
    "EMBED_URL": None,
    "EMBED_TOKEN": None,
    "HOPS": 2,
    "K1": 20,
    "K2": 10,
    "DIRECTION": "both",
    "LAYERS": None,
    "D_HIDDEN": 32,
    "D_PROMPT": 48,
    "ACTIVATION": "elu",
    "SCORING": "dot",
    "SELF_LOOPS": True,
    "SHARED_PROJECTION": True,
    "PROMPT_MODE": "graph",
    "SELECT_TOP_M": DEFAULT_TOP_M,
    "MAX_ITERATIONS": 4,
    "LR": 0.01,
    "EPOCHS": 50,
    "OPTIMIZER": "adam",
    "HOLDOUT_FRACTION": 0.2,
    "FREEZE_HEAD": False,
    "SEED": 0,
    "BACKEND": "scripted-mock",
    "CHAT_URL": None,
    "CHAT_KEY": None,
    "CHAT_MODEL": "gpt-4o",
    "BACKEND_RETRIES": 2,
    "WORKERS": 1,
    "GRAPH_PATH": None,
    "CHECKPOINT_PATH": None,
}

# published widths, for reference runs only
FULL_SIZE_PROFILE = {"EMBED_DIM": 768, "D_HIDDEN": 128, "D_PROMPT": 2880, "HOPS": 2}

# the synthetic benchmark needs fewer hash collisions than the default width gives
BENCH_PROFILE = {"EMBED_DIM": 256}


def _flag(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "on")
    return bool(value)


@dataclass(frozen=True)
class PipelineConfig:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    reasoning: ReasonConfig = field(default_factory=ReasonConfig)
    settings: dict = field(default_factory=lambda: dict(DEFAULTS))

    @property
    def seed(self) -> int:
        return int(self.settings["SEED"])

    @property
    def workers(self) -> int:
        return max(1, int(self.settings["WORKERS"]))

    @classmethod
    def from_mapping(cls, mapping: Mapping | None = None, **overrides) -> "PipelineConfig":
        settings = dict(DEFAULTS)
        for key, value in {**(mapping or {}), **overrides}.items():
            if key in DEFAULTS and value is not None:
                settings[key] = value
        try:
            hops = int(settings["HOPS"])
            extraction = ExtractionConfig(hops, int(settings["K1"]), int(settings["K2"]), settings["DIRECTION"])
            encoder = EncoderConfig(
                layers=int(settings["LAYERS"] or hops),
                d_in=int(settings["EMBED_DIM"]),
                d_hidden=int(settings["D_HIDDEN"]),
                d_prompt=int(settings["D_PROMPT"]),
                self_loops=_flag(settings["SELF_LOOPS"]),
                activation=settings["ACTIVATION"],
                scoring=settings["SCORING"],
                shared_projection=_flag(settings["SHARED_PROJECTION"]),
                prompt_mode=str(settings["PROMPT_MODE"]).lower(),
            )
            training = TrainingConfig(
                epochs=int(settings["EPOCHS"]),
                lr=float(settings["LR"]),
                optimizer=OptimizerConfig(kind=str(settings["OPTIMIZER"]).lower()),
                holdout_fraction=float(settings["HOLDOUT_FRACTION"]),
                seed=int(settings["SEED"]),
                top_m=int(settings["SELECT_TOP_M"]),
                freeze_head=_flag(settings["FREEZE_HEAD"]),
            )
            reasoning = ReasonConfig(extraction, encoder, int(settings["MAX_ITERATIONS"]),
                                     int(settings["SELECT_TOP_M"]))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid pipeline setting: {exc}")
        except GraspError as exc:
            raise ConfigurationError(exc.message)
        if training.optimizer.kind not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {training.optimizer.kind!r}", "OPTIMIZER")
        return cls(extraction, encoder, training, reasoning, settings)

    @classmethod
    def from_pyfile(cls, path: str | Path, **overrides) -> "PipelineConfig":
        """Read `KEY = value` lines the way Flask reads its own settings files."""
        loaded = Config(str(Path(path).resolve().parent))
        try:
            loaded.from_pyfile(str(Path(path).resolve()))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}")
        return cls.from_mapping(loaded, **overrides)
