"""Run configuration: a versioned JSON file driving every command.

Schema (version 1):

    {
      "version": 1,
      "seed": 7,
      "model": {
        "kind": "answer" | "block" | "block_ar",
        "dirac": false, "ar_layers": 0, "ar_kernel": 3,
        "dims": {"embed", "max_len", "turns", "latent", "fixed_embed",
                 "feature_dim", "cond_channels", "cond_grid"}
      },
      "corpus": {"train", "eval", "embeddings",   # paths, relative to the out dir
                 "n_train", "n_eval", "candidates", "min_freq"},
      "training": {"epochs", "ramp_epochs", "batch_size", "lr",
                   "checkpoint_every", "mask_pad"},
      "evaluation": {"mode", "score", "lw_samples"}
    }

The model's vocabulary size is not configured; it is derived from the
training corpus, which makes the whole run a function of (config, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .colouring import ITERATIVE_MODES, MODE_BLOCK
from .cvae import Dimensions, KINDS, ModelSpec
from .training import TrainConfig

CONFIG_VERSION = 1
EVAL_MODES = (MODE_BLOCK,) + ITERATIVE_MODES
SCORE_FNS = ("elbo", "lw", "w2v")

_DIM_DEFAULTS = dict(embed=32, max_len=16, turns=5, latent=32, fixed_embed=32,
                     feature_dim=272, cond_channels=17, cond_grid=(4, 4))


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    train: str = "train.jsonl"
    eval: str = "eval.jsonl"
    embeddings: str = "embeddings.txt"
    n_train: int = 400
    n_eval: int = 100
    candidates: int = 10
    min_freq: int = 1


@dataclass
class EvalConfig:
    mode: str | None = None
    score: str = "w2v"
    lw_samples: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    model_kind: str = "answer"
    dirac: bool = False
    ar_layers: int = 0
    ar_kernel: int = 3
    dims: dict = field(default_factory=lambda: dict(_DIM_DEFAULTS))
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.model_kind not in KINDS:
            raise ConfigError(f"model.kind must be one of {KINDS}, got {self.model_kind!r}")
        if self.evaluation.mode is not None and self.evaluation.mode not in EVAL_MODES:
            raise ConfigError(f"evaluation.mode must be one of {EVAL_MODES}, "
                              f"got {self.evaluation.mode!r}")
        if self.evaluation.score not in SCORE_FNS:
            raise ConfigError(f"evaluation.score must be one of {SCORE_FNS}, "
                              f"got {self.evaluation.score!r}")
        unknown = set(self.dims) - set(_DIM_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown model.dims keys: {sorted(unknown)}")
        return self

    def model_spec(self, vocab_size: int) -> ModelSpec:
        dims = dict(_DIM_DEFAULTS)
        dims.update(self.dims)
        dims["cond_grid"] = tuple(dims["cond_grid"])
        try:
            return ModelSpec(kind=self.model_kind, dims=Dimensions(vocab=vocab_size, **dims),
                             ar_layers=self.ar_layers, ar_kernel=self.ar_kernel,
                             dirac=self.dirac).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "model": {"kind": self.model_kind, "dirac": self.dirac,
                      "ar_layers": self.ar_layers, "ar_kernel": self.ar_kernel,
                      "dims": {k: (list(v) if isinstance(v, tuple) else v)
                               for k, v in self.dims.items()}},
            "corpus": vars(self.corpus).copy(),
            "training": {"epochs": self.training.epochs, "ramp_epochs": self.training.ramp_epochs,
                         "batch_size": self.training.batch_size, "lr": self.training.lr,
                         "checkpoint_every": self.training.checkpoint_every,
                         "mask_pad": self.training.mask_pad},
            "evaluation": vars(self.evaluation).copy(),
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {raw.get('version')!r}")
        model = raw.get("model", {})
        cfg = cls(
            seed=int(raw.get("seed", 0)),
            model_kind=model.get("kind", "answer"),
            dirac=bool(model.get("dirac", False)),
            ar_layers=int(model.get("ar_layers", 0)),
            ar_kernel=int(model.get("ar_kernel", 3)),
            dims=dict(model.get("dims", {})),
            corpus=_load_section(CorpusConfig, raw.get("corpus", {})),
            training=_load_training(raw.get("training", {}), int(raw.get("seed", 0))),
            evaluation=_load_section(EvalConfig, raw.get("evaluation", {})),
        )
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(raw)


def _load_section(cls, raw: dict):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**raw)


def _load_training(raw: dict, seed: int) -> TrainConfig:
    allowed = {"epochs", "ramp_epochs", "batch_size", "lr", "checkpoint_every", "mask_pad"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(seed=seed, **{k: raw[k] for k in raw})
