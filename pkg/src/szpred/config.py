"""Experiment configuration: dataclasses plus a key=value file format.

Every constant that reaches a computation lives here and is echoed back
by ``to_text``, so a report's embedded config reproduces the run.  Keys
use dotted section prefixes for the nested groups, e.g.
``model.dim_temporal = 64`` or ``train.learning_rate = 0.001``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, SelectPolicy
from .train import TrainConfig


class ConfigError(ValueError):
    """A config file or override cannot be applied."""


@dataclass
class EvalConfig:
    decision_threshold: float = 0.5
    persistence_s: int = 240
    refractory_s: int = 1800


@dataclass
class ExperimentConfig:
    data_dir: str = "cohort"
    output_dir: str = "runs"
    division: str = "even"            # even | seizure-independent
    rng_seed: int = 7
    sampling_rate: int = 256          # for CSV records (EDF carries its own)
    sph_s: int = 180
    sop_s: int = 1800
    exclusion_s: int = 3600
    merge_gap_s: int = 3600
    min_preictal_fraction: float = 0.5
    feature_eps: float = 1e-12
    layer_norm_eps: float = 1e-5
    workers: int = 1
    write_traces: bool = True
    write_plots: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    select: SelectPolicy = field(default_factory=SelectPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_text(self) -> str:
        """Fully-resolved key=value dump, one line per constant."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    lines.append(f"{f.name}.{sub.name} = {getattr(value, sub.name)!r}")
            else:
                lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    def apply(self, key: str, raw: str) -> None:
        """Set one dotted key from its textual value."""
        target = self
        name = key
        if "." in key:
            section, name = key.split(".", 1)
            if "." in name or not hasattr(self, section):
                raise ConfigError(f"unknown config section in {key!r}")
            target = getattr(self, section)
            if not dataclasses.is_dataclass(target):
                raise ConfigError(f"{section!r} is not a config section")
        spec = {f.name: f for f in fields(target)}
        if name not in spec:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _parse_value(raw, spec[name].type, current, key))


def _parse_value(raw: str, annotation, current, key: str):
    raw = raw.strip()
    if raw.startswith(("'", '"')) and raw.endswith(raw[0]) and len(raw) >= 2:
        raw = raw[1:-1]
    kind = type(current) if current is not None else str
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} for key {key!r} as {kind.__name__}") from None


def load_config(path) -> ExperimentConfig:
    cfg = ExperimentConfig()
    apply_config_file(cfg, path)
    return cfg


def apply_config_file(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            try:
                cfg.apply(key.strip(), raw.strip())
            except ConfigError as exc:
                raise ConfigError(f"{path}: line {lineno}: {exc}") from None


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> None:
    """Apply ``key=value`` strings from the command line."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        cfg.apply(key.strip(), raw.strip())
