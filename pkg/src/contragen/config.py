"""Experiment configuration: nested dataclasses plus a flat key=value
file format with dotted namespaces (``train.gamma=0.01``).

Parsing is strict: unknown keys are rejected by name, and every section
is rebuilt through its dataclass constructor so field invariants run on
the final values.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .contrastive import LossConfig, OracleConfig
from .data import SyntheticTaskSpec
from .decoding import BeamConfig
from .errors import ConfigError, ValidationError
from .model import ModelConfig
from .training import BaselineMode, TrainConfig


@dataclass
class DatasetSpec:
    format: str = "jsonl"  # jsonl | parallel-text
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""
    source_field: str = "source"
    target_field: str = "target"

    def __post_init__(self) -> None:
        if self.format not in ("jsonl", "parallel-text"):
            raise ValidationError(f"unknown dataset format {self.format!r}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    mode: str = "CONT_NPAIRS"
    alpha: float = 0.5


_SECTIONS = {
    "model": ModelConfig,
    "beam": BeamConfig,
    "train": TrainConfig,
    "oracle": OracleConfig,
    "loss": LossConfig,
    "data": DatasetSpec,
    "task": SyntheticTaskSpec,
}
_TOP_SCALARS = ("mode", "alpha")


def _coerce(raw: str, annotation, key: str):
    raw = raw.strip()
    if annotation in (int, "int"):
        return int(raw)
    if annotation in (float, "float"):
        return float(raw)
    if annotation in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key '{key}': cannot parse boolean from {raw!r}")
    if annotation in (str, "str"):
        return raw
    # optional ints (e.g. train.train_beam_size)
    text = str(annotation)
    if "int" in text and ("None" in text or "Optional" in text):
        if raw.lower() in ("none", ""):
            return None
        return int(raw)
    raise ConfigError(f"config key '{key}' has unsupported type {annotation}")


def parse_overrides(lines: list[str]) -> dict[str, dict[str, str] | str]:
    """Split key=value lines into per-section raw override maps."""
    sections: dict = {name: {} for name in _SECTIONS}
    top: dict[str, str] = {}
    for line_no, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {line_no}: expected key=value, got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config key '{key}'")
            cls = _SECTIONS[section]
            if name not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key '{key}'")
            sections[section][name] = value
        elif key in _TOP_SCALARS:
            top[key] = value
        else:
            raise ConfigError(f"unknown config key '{key}'")
    sections["_top"] = top
    return sections


def build_config(sections: dict) -> ExperimentConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        hints = get_type_hints(cls)
        values = asdict(cls())
        for fname, raw in sections.get(name, {}).items():
            try:
                values[fname] = _coerce(raw, hints.get(fname, str), f"{name}.{fname}")
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key '{name}.{fname}': {exc}") from exc
        try:
            kwargs[name] = cls(**values)
        except ValidationError as exc:
            raise ConfigError(f"config section '{name}': {exc}") from exc
    top = sections.get("_top", {})
    cfg = ExperimentConfig(**kwargs)
    if "mode" in top:
        cfg.mode = top["mode"]
    if "alpha" in top:
        try:
            cfg.alpha = float(top["alpha"])
        except ValueError as exc:
            raise ConfigError(f"config key 'alpha': {exc}") from exc
    validate_experiment(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return build_config(parse_overrides(text.splitlines()))


def validate_experiment(cfg: ExperimentConfig) -> None:
    """Cross-field checks beyond per-section invariants."""
    if cfg.mode not in BaselineMode.__members__:
        raise ConfigError(
            f"unknown mode {cfg.mode!r}; choose from {sorted(BaselineMode.__members__)}"
        )
    if not (0.0 <= cfg.alpha <= 1.0):
        raise ConfigError("alpha must lie in [0, 1]")
    if cfg.train.train_beam_size is not None and cfg.train.train_beam_size > cfg.train.m:
        raise ConfigError("train.train_beam_size must not exceed train.m")
    if cfg.beam.max_len + 1 > cfg.model.max_len:
        raise ConfigError("model.max_len must exceed beam.max_len (one slot for BOS)")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {name: asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["mode"] = cfg.mode
    out["alpha"] = cfg.alpha
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(data.get(name, {}))
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown config key '{name}.{sorted(unknown)[0]}'")
        kwargs[name] = cls(**section)
    cfg = ExperimentConfig(
        **kwargs, mode=data.get("mode", "CONT_NPAIRS"), alpha=float(data.get("alpha", 0.5))
    )
    validate_experiment(cfg)
    return cfg


def _flatten(data: dict, prefix: str = "") -> list[tuple[str, str]]:
    items = []
    for key in sorted(data):
        value = data[key]
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            items.extend(_flatten(value, prefix=f"{path}."))
        else:
            if value is None:
                text = "none"
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            items.append((path, text))
    return items


def canonical_text(cfg: ExperimentConfig) -> str:
    """Sorted dotted key=value rendering used for hashing and provenance."""
    return "\n".join(f"{k}={v}" for k, v in _flatten(config_to_dict(cfg))) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(canonical_text(cfg), encoding="utf-8")
