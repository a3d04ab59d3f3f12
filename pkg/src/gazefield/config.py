"""Experiment configuration and its loading from JSON or YAML files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .compositor import ModelConfig
from .errors import ConfigError, InvalidArgument
from .objectives import LossWeights


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    The ablation flags select the rows of the architecture and loss
    ablations: ``two_stream`` and ``rotation`` are copied into the model
    config, the three loss flags switch the perceptual, functional and
    disentanglement terms on or off.
    """

    learning_rate: float = 1e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 5000
    images_per_step: int = 4
    steps_per_epoch: int = 500
    grad_clip: float = 10.0
    stratified: bool = True
    seed: int = 0
    dataset: str = ""
    checkpoint_every: int = 500
    log_every: int = 10
    finetune_steps: int = 200
    finetune_lr: float = 5e-3
    # ablation flags
    two_stream: bool = True
    rotation: bool = True
    functional: bool = True
    perceptual: bool = True
    disentangle: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _build(ModelConfig, self.model, "model")
        if isinstance(self.weights, dict):
            self.weights = _build(LossWeights, self.weights, "weights")
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0 or self.steps < 0 or self.images_per_step < 1 or self.steps_per_epoch < 1:
            raise ConfigError("learning_rate, steps, images_per_step and steps_per_epoch must be positive")
        # the model config mirrors the architecture flags
        self.model = replace(self.model, two_stream=self.two_stream, rotation=self.rotation)

    @property
    def rays_per_step(self) -> int:
        return self.images_per_step * self.model.grid ** 2

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return replace(w, lambda_p=w.lambda_p if self.perceptual else 0.0,
                       lambda_f=w.lambda_f if self.functional else 0.0,
                       lambda_d=w.lambda_d if self.disentangle else 0.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def digest(self) -> str:
        """Stable hash of the configuration (dataset path excluded)."""
        d = self.to_dict()
        d.pop("dataset")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if k not in d:
                raise ConfigError(f"unknown config key {k!r}")
            d[k] = v
        return from_dict(d)


def _build(cls, data: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, InvalidArgument) as e:
        raise ConfigError(f"invalid {where} section: {e}") from e


def from_dict(data: dict) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    return _build(TrainConfig, dict(data), "config")


def load_config(path) -> TrainConfig:
    """Read a TrainConfig from ``.json`` or ``.yaml``/``.yml``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    suffix = path.suffix.lower()
    try:
        if suffix == ".json":
            data = json.loads(text)
        elif suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            raise ConfigError(f"unsupported config format {suffix!r}")
    except ConfigError:
        raise
    except Exception as e:  # parser-specific exception types
        raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(data or {})
