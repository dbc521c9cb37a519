"""Experiment configuration: JSON schema, named profiles and typed views."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import jsonschema

from .backbone.model import ModelConfig
from .degradation import TASKS, ConfigError, DegradationSpec
from .objectives import LossWeights
from .prompting import RelatednessGraph

STRATEGIES = ("none", "p_full", "p_attn", "p_attn_joint", "p_attn_enhanced")

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_TRAIN = _obj({
    "epochs": _POS_INT,
    "batch_size": _POS_INT,
    "lr_init": {"type": "number", "exclusiveMinimum": 0},
    "lr_min_ratio": {"type": "number", "minimum": 0, "maximum": 1},
    "crop_size": _POS_INT,
    "flip_prob": {"type": "number", "minimum": 0, "maximum": 1},
    "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "adam_eps": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "checkpoint_every": _NONNEG_INT,
    "eval_per_task": _NONNEG_INT,
})

SCHEMA = _obj({
    "name": {"type": "string", "minLength": 1},
    "seed": _NONNEG_INT,
    "output_root": {"type": "string"},
    "tasks": {"type": "array", "items": {"type": "string"}, "minItems": 1, "uniqueItems": True},
    "check_finite": {"type": "boolean"},
    "data": _obj({
        "root": {"type": "string"},
        "test_root": {"type": "string"},
        "size": {"type": "integer", "minimum": 16},
        "train_per_task": _NONNEG_INT,
        "test_per_task": _NONNEG_INT,
        "test_seed": _NONNEG_INT,
        "degradations": _obj({t: {"type": "object"} for t in TASKS}),
    }),
    "model": _obj({
        "embed_dims": {"type": "array", "items": _POS_INT, "minItems": 5, "maxItems": 5},
        "depths": {"type": "array", "items": _POS_INT, "minItems": 5, "maxItems": 5},
        "num_heads": {"type": "array", "items": _POS_INT, "minItems": 5, "maxItems": 5},
        "window_size": _POS_INT,
        "mlp_ratio": {"type": "number", "exclusiveMinimum": 0},
        "use_shifted_windows": {"type": "boolean"},
        "decoder_attention_stages": {"type": "array", "items": {"type": "integer"}},
        "sk_reduction": _POS_INT,
        "in_channels": _POS_INT,
        "seed": _NONNEG_INT,
    }),
    "prompt": _obj({
        "strategy": {"enum": list(STRATEGIES)},
        "length": _NONNEG_INT,
        "rank": _NONNEG_INT,
        "init_std": {"type": "number", "minimum": 0},
        "key_bias": {"type": "number", "maximum": 0},
        "seed": _NONNEG_INT,
    }),
    "loss": _obj({
        "lambda_per": {"type": "number", "minimum": 0},
        "lambda_cont": {"type": "number", "minimum": 0},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "S": {"type": "array", "items": {"type": "integer"}},
        "contrastive_source": {"enum": ["heads", "prompts"]},
        "perceptual_seed": _NONNEG_INT,
    }),
    "graph": {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}},
    "pretrain": _TRAIN,
    "tune": _TRAIN,
})

_DESK = {
    "name": "desk",
    "seed": 0,
    "output_root": "runs",
    "tasks": list(TASKS),
    "check_finite": False,
    "data": {"root": "data/train", "test_root": "data/test", "size": 64, "train_per_task": 64,
             "test_per_task": 16, "test_seed": 1, "degradations": {}},
    "model": ModelConfig().to_dict(),
    "prompt": {"strategy": "p_attn_enhanced", "length": 12, "rank": 4, "init_std": 0.02, "key_bias": -4.0, "seed": 0},
    "loss": {"lambda_per": 0.1, "lambda_cont": 0.1, "tau": 0.5, "S": [3, 8, 15],
             "contrastive_source": "heads", "perceptual_seed": 1234},
    "graph": {"rain": ["haze"], "haze": ["rain"], "snow": ["raindrop"], "raindrop": ["snow"]},
    "pretrain": {"epochs": 30, "batch_size": 8, "lr_init": 1e-3, "lr_min_ratio": 0.01, "crop_size": 64,
                 "flip_prob": 0.5, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "weight_decay": 0.0,
                 "grad_clip": 1.0, "checkpoint_every": 0, "eval_per_task": 0},
    "tune": {"epochs": 15, "batch_size": 8, "lr_init": 3e-3, "lr_min_ratio": 0.01, "crop_size": 64,
             "flip_prob": 0.5, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8, "weight_decay": 0.0,
             "grad_clip": 1.0, "checkpoint_every": 0, "eval_per_task": 4},
}


def _paper_profile() -> dict:
    cfg = copy.deepcopy(_DESK)
    cfg["name"] = "paper"
    cfg["data"].update({"size": 256, "train_per_task": 512})
    cfg["pretrain"].update({"epochs": 200, "batch_size": 32, "lr_init": 3e-4, "crop_size": 256, "grad_clip": None})
    cfg["tune"].update({"epochs": 100, "batch_size": 32, "lr_init": 5e-5, "crop_size": 256, "grad_clip": None})
    return cfg


PROFILES = {"desk": _DESK, "paper": _paper_profile()}


def profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return copy.deepcopy(PROFILES[name])


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("graph", "degradations"):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    return path or "<root>"


def validate(cfg: dict) -> dict:
    """Schema check plus semantic checks; raises :class:`ConfigError` naming the field."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"config field '{_error_path(err)}': {err.message}") from None
    tasks = cfg["tasks"]
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ConfigError(f"config field 'tasks': unknown task(s) {unknown}")
    for task, raw in cfg["data"].get("degradations", {}).items():
        try:
            DegradationSpec(task, cfg["seed"], dict(raw))
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"config field 'data.degradations.{task}': {exc}") from None
    try:
        ModelConfig(**_model_kwargs(cfg["model"])).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config field 'model': {exc}") from None
    for stage in ("pretrain", "tune"):
        tc = cfg[stage]
        if tc["batch_size"] % len(tasks):
            raise ConfigError(f"config field '{stage}.batch_size': {tc['batch_size']} is not divisible by "
                              f"the task count {len(tasks)}")
        if tc["crop_size"] > cfg["data"]["size"]:
            raise ConfigError(f"config field '{stage}.crop_size': {tc['crop_size']} exceeds image size "
                              f"{cfg['data']['size']}")
    try:
        LossWeights(**_loss_kwargs(cfg["loss"]))
        graph(cfg)
    except ValueError as exc:
        raise ConfigError(f"config field 'loss'/'graph': {exc}") from None
    return cfg


def load(path: Optional[str] = None, profile_name: str = "desk", overrides: Optional[dict] = None) -> dict:
    cfg = profile(profile_name)
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        cfg = deep_merge(cfg, raw)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# typed views


def _model_kwargs(raw: dict) -> dict:
    kw = dict(raw)
    for k in ("embed_dims", "depths", "num_heads", "decoder_attention_stages"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return kw


def _loss_kwargs(raw: dict) -> dict:
    return {k: v for k, v in raw.items() if k != "perceptual_seed"}


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**_model_kwargs(cfg["model"]))


def loss_weights(cfg: dict, strategy: Optional[str] = None) -> LossWeights:
    kw = _loss_kwargs(cfg["loss"])
    strategy = strategy or cfg["prompt"]["strategy"]
    if strategy != "p_attn_enhanced":
        kw["lambda_cont"] = 0.0
    return LossWeights(**kw)


def graph(cfg: dict) -> RelatednessGraph:
    return RelatednessGraph.from_adjacency(cfg["tasks"], cfg["graph"])


def degradation_specs(cfg: dict) -> dict:
    raw = cfg["data"].get("degradations", {})
    return {t: DegradationSpec(t, cfg["seed"], dict(raw.get(t, {}))) for t in TASKS}


@dataclass
class TrainConfig:
    stage: str
    epochs: int
    batch_size: int
    lr_init: float
    lr_min_ratio: float = 0.01
    crop_size: int = 64
    flip_prob: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: Optional[float] = 1.0
    checkpoint_every: int = 0
    eval_per_task: int = 0
    seed: int = 0
    tasks: list = field(default_factory=lambda: list(TASKS))

    def __post_init__(self):
        if self.stage not in ("pretrain", "tune", "joint"):
            raise ConfigError(f"stage must be pretrain, tune or joint, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size % len(self.tasks):
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by the task count {len(self.tasks)}")

    @property
    def lr_min(self) -> float:
        return self.lr_init * self.lr_min_ratio

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in names})


def train_config(cfg: dict, stage: str) -> TrainConfig:
    """``stage`` is pretrain, tune or joint; joint reuses the pretrain schedule."""
    section = cfg["tune"] if stage == "tune" else cfg["pretrain"]
    return TrainConfig(stage=stage, seed=cfg["seed"], tasks=list(cfg["tasks"]), **section)
