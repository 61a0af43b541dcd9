"""Flat ``key = value`` experiment configuration files.

Blank lines and ``#`` comments are ignored. Keys are the fields of
:class:`~poolbench.optim.TrainConfig` and :class:`~poolbench.encoder.EncoderConfig`
plus ``train_path`` and ``eval_path`` (relative paths resolve against the
config file's directory). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .numerics import ConfigError
from .optim import TrainConfig

PATH_KEYS = ("train_path", "eval_path")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train_path: str | None = None
    eval_path: str | None = None

    def __post_init__(self):
        if self.train.max_seq_len > self.encoder.max_positions:
            raise ConfigError(
                f"max_seq_len ({self.train.max_seq_len}) exceeds max_positions ({self.encoder.max_positions})"
            )

    def to_flat(self) -> dict:
        flat = {**self.train.to_dict(), **self.encoder.to_dict()}
        flat["train_path"] = self.train_path
        flat["eval_path"] = self.eval_path
        return flat

    def replace(self, **overrides) -> ExperimentConfig:
        return from_flat({**self.to_flat(), **overrides})


def _defaults() -> dict:
    return {**TrainConfig().to_dict(), **EncoderConfig().to_dict(), **{k: None for k in PATH_KEYS}}


def valid_keys() -> list[str]:
    return sorted(_defaults())


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def from_flat(values: dict) -> ExperimentConfig:
    known = _defaults()
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(known))}")
    merged = {**known, **values}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    enc_fields = {f.name for f in dataclasses.fields(EncoderConfig)}
    train_kw = {k: merged[k] for k in train_fields}
    train_kw["dropout_rates"] = tuple(train_kw["dropout_rates"])
    return ExperimentConfig(
        TrainConfig(**train_kw),
        EncoderConfig(**{k: merged[k] for k in enc_fields}),
        merged["train_path"],
        merged["eval_path"],
    )


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    defaults = _defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
        if key in PATH_KEYS:
            path = Path(raw)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            values[key] = str(path)
        else:
            values[key] = _coerce(key, raw, defaults[key])
    return from_flat(values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ", ".join(repr(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
