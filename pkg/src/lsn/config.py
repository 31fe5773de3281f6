"""Flat ``key=value`` run configuration with canonical echo."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .evalkit import DEFAULT_TOLERANCE_FRAC
from .trainer import DEFAULT_LR_MULTIPLIER, BASE_LR, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    variant: str = "lsn3"
    width_multiplier: float = 0.5
    base_lr: float = BASE_LR
    lr_multiplier: float = DEFAULT_LR_MULTIPLIER
    momentum: float = 0.9
    weight_decay: float = 0.002
    max_iters: int = 5000
    seed: int = 0
    strategy: str = "end-to-end"
    tolerance_frac: float = DEFAULT_TOLERANCE_FRAC
    thresholds: int = 99

    def validate(self) -> None:
        v = self.variant
        if not (v.startswith("lsn") and v[3:] in ("1", "2", "3", "4")):
            raise ConfigError(f"variant must be lsn1..lsn4, got {v!r}")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier must be positive")
        if self.tolerance_frac < 0:
            raise ConfigError("tolerance_frac must be >= 0")
        if self.thresholds < 1:
            raise ConfigError("thresholds must be >= 1")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, lr_multiplier=self.lr_multiplier, momentum=self.momentum,
                           weight_decay=self.weight_decay, max_iters=self.max_iters, seed=self.seed,
                           strategy=self.strategy)

    def model_config(self) -> dict[str, str]:
        return {"variant": self.variant, "width_multiplier": repr(self.width_multiplier)}

    def dumps(self) -> str:
        """Canonical form: every key in declaration order, ``repr`` of floats."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(Config)}


def parse_config(text: str) -> Config:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = _TYPES[key]
        try:
            values[key] = float(value) if kind == "float" else int(value) if kind == "int" else value
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects {kind}, got {value!r}") from None
    cfg = Config(**values)
    cfg.validate()
    return cfg


def load_config(path: Path | str | None) -> Config:
    if path is None:
        cfg = Config()
        cfg.validate()
        return cfg
    return parse_config(Path(path).read_text())
