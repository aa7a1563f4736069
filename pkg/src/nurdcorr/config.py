"""Flat ``section.key = value`` config files.

Sections: ``train``, ``model``, ``gen``, ``loss``, ``phantom``.  Lines starting
with ``#`` are comments.  Unknown sections or keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .frames import PhantomConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


def desk_model_config(n_alines: int = 256, n_points: int = 64) -> ModelConfig:
    return ModelConfig(n_alines=n_alines, n_points=n_points, embed_dim=128, n_heads=4,
                       n_blocks=5, mlp_hidden=256)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=desk_model_config)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def sections(self) -> dict:
        # data-shape fields are taken from the dataset, not the config
        return {"train": self.train, "model": self.model, "gen": self.train.gen,
                "loss": self.train.weights, "phantom": self.phantom}

    def set(self, dotted: str, raw: str) -> None:
        if "." not in dotted:
            raise ConfigFileError(f"key {dotted!r} must be of the form section.key")
        section, key = dotted.split(".", 1)
        target = self.sections().get(section)
        if target is None:
            raise ConfigFileError(
                f"unknown section {section!r} (expected one of {sorted(self.sections())})")
        kinds = {f.name: f.type for f in fields(target)
                 if f.name not in ("gen", "weights")}
        if key not in kinds:
            raise ConfigFileError(f"unknown key {dotted!r}")
        current = getattr(target, key)
        setattr(target, key, _coerce(raw, current, dotted))

    def items(self):
        for section, obj in self.sections().items():
            for f in fields(obj):
                if f.name in ("gen", "weights"):
                    continue
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def echo(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.items())


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigFileError(f"bad value {raw!r} for {key}") from exc
    return raw


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides: list[str] | None = None,
                base: RunConfig | None = None) -> RunConfig:
    """Defaults, then file values, then ``key=value`` overrides (last wins)."""
    cfg = base or RunConfig()
    if path is not None:
        for key, value in parse_lines(Path(path).read_text()):
            cfg.set(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigFileError(f"override {item!r} must be section.key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg
