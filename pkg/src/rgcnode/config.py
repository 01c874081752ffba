"""Declarative training configuration: dataclass schema, YAML files with ``include`` composition."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .models import DISPLAY_NAMES, MODEL_KINDS, SequencePlan

LOSS_KINDS = ("mse", "mae", "poisson")
PRESET_DIR = Path(__file__).with_name("presets")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "cfc"
    M: int = 1
    N: int = 40
    W: int = 0
    batch_size: int = 4096
    max_epochs: int = 50
    patience: int = 7
    encoder_lr: float = 0.001
    predictor_lr: float = 0.002
    loss: str = "mse"
    seed: int = 0
    validate_every: int | str = "epoch"
    scheduler_factor: float = 0.5
    scheduler_patience: int = 3
    scheduler_min_delta: float = 1e-4
    min_lr: float = 1e-6
    hidden: int | None = None
    latent: int = 32
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 48, 64])
    unfold_steps: int = 6
    grad_clip: float | None = 5.0
    name: str | None = None

    def __post_init__(self):
        errors = []
        if self.model not in MODEL_KINDS:
            errors.append(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.loss not in LOSS_KINDS:
            errors.append(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if self.max_epochs < 1:
            errors.append("max_epochs must be >= 1")
        if self.encoder_lr <= 0 or self.predictor_lr <= 0:
            errors.append("learning rates must be > 0")
        if not (self.validate_every == "epoch" or (isinstance(self.validate_every, int) and self.validate_every > 0)):
            errors.append(f"validate_every must be 'epoch' or a positive sample count, got {self.validate_every!r}")
        if self.model == "convnet" and self.M != 1:
            errors.append("convnet requires M=1")
        if errors:
            raise ConfigError("; ".join(errors))
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.plan  # validates M/N/W

    @property
    def plan(self) -> SequencePlan:
        return SequencePlan(self.M, self.N, self.W)

    @property
    def run_name(self) -> str:
        """Display name in the ``Model_LOSS-N`` convention, e.g. ``LTC_MAE-20``."""
        if self.name:
            return self.name
        base = f"{DISPLAY_NAMES[self.model]}_{self.loss.upper()}-{self.N}"
        return base if self.M == 1 else f"{base}-{self.plan.label}"

    @property
    def clip_norm(self) -> float | None:
        return None if self.model == "convnet" else self.grad_clip

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return config_from_dict({**self.to_dict(), **changes})


FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def config_from_dict(data: dict) -> TrainConfig:
    unknown = sorted(set(data) - FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return TrainConfig(**data)


def resolve_include(ref: str, base_dir: Path | None) -> Path:
    """A relative path next to the including file, else a shipped preset name."""
    candidates = []
    if base_dir is not None:
        candidates.append(base_dir / ref)
    candidates.append(Path(ref))
    candidates.append(PRESET_DIR / ref)
    candidates.append(PRESET_DIR / f"{ref}.yaml")
    for c in candidates:
        if c.is_file():
            return c
    raise ConfigError(f"include {ref!r} not found")


def load_mapping(path, _seen: tuple = ()) -> dict:
    """Read a YAML mapping, merging ``include`` targets first (later keys win)."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for ref in includes:
        merged.update(load_mapping(resolve_include(ref, path.parent), _seen + (path,)))
    merged.update(data)
    return merged


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    data = load_mapping(resolve_include(str(path), None)) if path else {}
    data.update(overrides or {})
    return config_from_dict(data)


def dump_config(cfg: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml") if not p.stem.startswith("sweep"))


__all__ = ["TrainConfig", "ConfigError", "LOSS_KINDS", "config_from_dict", "load_config", "load_mapping",
           "dump_config", "list_presets", "PRESET_DIR"]
