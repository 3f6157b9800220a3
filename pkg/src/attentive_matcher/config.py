"""Model and run configuration, presets, and the key-value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ContractError, ParseError


@dataclass
class ModelConfig:
    modality: str = "images"
    image_size: int = 64
    channels: tuple = (64, 64, 128, 128)
    d_model: int = 128
    heads: int = 4
    rounds: int = 2
    block_hidden: int = 256
    agg_dim: int = 2048
    agg_hidden: int = 256
    point_hidden: int = 128
    point_dropout: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.modality not in ("images", "points"):
            raise ContractError(f"modality must be 'images' or 'points', not {self.modality!r}")
        if self.d_model % self.heads:
            raise ContractError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.d_model % 2:
            raise ContractError("d_model must be even for the positional encoding")
        if self.modality == "images":
            if len(self.channels) != 4 or self.channels[-1] != self.d_model:
                raise ContractError("image encoder needs four conv layers ending in d_model channels")
            if self.image_size % 4:
                raise ContractError("image_size must be divisible by 4")

    @property
    def n_tokens(self):
        """Token count per image (points vary per instance)."""
        return (self.image_size // 4) ** 2 if self.modality == "images" else None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def preset(name: str, modality: str = "images") -> ModelConfig:
    """``paper`` sizes or the reduced ``desk`` sizes, per modality."""
    if name == "paper":
        if modality == "images":
            return ModelConfig()
        return ModelConfig(modality="points", d_model=64, block_hidden=128, agg_dim=1024)
    if name == "desk":
        return ModelConfig(
            modality=modality,
            image_size=32,
            channels=(32, 32, 32, 32),
            d_model=32,
            heads=4,
            rounds=1,
            block_hidden=64,
            agg_dim=64,
            agg_hidden=64,
            point_hidden=64,
        )
    raise ContractError(f"unknown preset {name!r}")


@dataclass
class TrainConfig:
    batch_size: int = 256
    batches_per_epoch: int = 500
    max_epochs: int = 1000
    max_steps: int | None = None
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    clip: float = 2.5
    val_episodes: int = 200
    val_way: int = 20
    patience: int = 20
    seed: int = 0
    modality: str = "images"
    augment: bool = False

    def __post_init__(self):
        for name in ("batch_size", "batches_per_epoch", "max_epochs", "val_episodes", "val_way", "lr_decay_every"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.batch_size % 2:
            raise ContractError("batch_size must be even (equal positive and negative pairs)")
        if self.clip <= 0 or self.lr <= 0:
            raise ContractError("clip threshold and learning rate must be positive")
        if self.patience < 0:
            raise ContractError("patience must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# key = value files


def parse_config_text(text: str, path=None) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", lineno, path)
        out[key] = value
    return out


def read_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), path)


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def split_list(value: str):
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class RunConfig:
    """Everything a CLI command needs: model, training, and paths.

    Built from preset defaults, then a config file, then command-line
    overrides, in that order of precedence.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "paper"
    background_root: str | None = None
    evaluation_root: str | None = None
    runs_root: str | None = None
    prepared_root: str | None = None
    out_dir: str = "runs/out"
    train_split: str = "training"
    validation_alphabets: list = field(default_factory=list)
    minimal_1: list = field(default_factory=list)
    minimal_2: list = field(default_factory=list)
    check_counts: bool = True

    @classmethod
    def build(cls, file_values: dict | None = None, overrides: dict | None = None):
        merged = dict(file_values or {})
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        name = str(merged.get("preset", "paper"))
        modality = str(merged.get("modality", "images"))
        model = preset(name, modality)
        train = TrainConfig(modality=modality)
        if name == "desk":
            train = dataclasses.replace(train, batch_size=32, batches_per_epoch=100, val_episodes=50,
                                        patience=5, lr=1e-3)
        cfg = cls(model=model, train=train, preset=name)
        model_kw, train_kw = {}, {}
        for key, value in merged.items():
            key = key.replace("-", "_")
            if key in ("preset", "modality"):
                continue
            if key in {f.name for f in fields(ModelConfig)}:
                model_kw[key] = _coerce(value, getattr(model, key)) if isinstance(value, str) else value
            elif key in {f.name for f in fields(TrainConfig)}:
                cur = getattr(train, key)
                if isinstance(value, str):
                    value = int(value) if cur is None else _coerce(value, cur)
                train_kw[key] = value
            elif key in ("validation_alphabets", "minimal_1", "minimal_2"):
                setattr(cfg, key, split_list(value) if isinstance(value, str) else list(value))
            elif key == "check_counts":
                setattr(cfg, key, _coerce(value, True) if isinstance(value, str) else bool(value))
            elif key in {f.name for f in fields(cls)}:
                setattr(cfg, key, value)
            else:
                raise ContractError(f"unknown configuration key {key!r}")
        cfg.model = dataclasses.replace(model, **model_kw)
        cfg.train = dataclasses.replace(train, modality=modality, **train_kw)
        return cfg

    def minimal(self):
        out = {}
        if self.minimal_1:
            out["background-minimal-1"] = self.minimal_1
        if self.minimal_2:
            out["background-minimal-2"] = self.minimal_2
        return out
