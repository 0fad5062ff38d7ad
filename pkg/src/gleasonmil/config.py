"""Pipeline configuration: an INI-style file with one section per stage.

Sections are [model], [tiling], [stain], [teacher], [student], [scoring]
and [synth]; every key maps onto the corresponding stage config. Unknown
sections or keys are rejected by name, and all values are validated before
any stage runs. CLI flags (currently --seed) override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from gleasonmil.model import EncoderConfig
from gleasonmil.selflearn import TrainConfig
from gleasonmil.slidescore import MLPConfig
from gleasonmil.synth import SynthConfig

__all__ = ["ConfigError", "TilingConfig", "ScoringConfig", "PipelineConfig",
           "load_pipeline_config"]


class ConfigError(ValueError):
    """A pipeline config file fails validation."""


@dataclass(frozen=True)
class TilingConfig:
    window: int = 512
    stride: int = 256
    min_tissue: float = 0.20

    def __post_init__(self) -> None:
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")
        if not 0.0 <= self.min_tissue <= 1.0:
            raise ValueError("min_tissue must be in [0, 1]")


@dataclass(frozen=True)
class ScoringConfig:
    knn_k: int = 20
    mlp_hidden: int = 64
    mlp_epochs: int = 20
    mlp_lr: float = 1e-2
    mlp_batch_size: int = 32
    soft_percentages: bool = False
    seed: int = 0

    def mlp_config(self) -> MLPConfig:
        return MLPConfig(hidden=self.mlp_hidden, epochs=self.mlp_epochs,
                         lr=self.mlp_lr, batch_size=self.mlp_batch_size, seed=self.seed)


@dataclass(frozen=True)
class StainConfig:
    # The reference image is given on the command line; this section exists
    # for symmetry and future knobs.
    pass


@dataclass
class PipelineConfig:
    model: EncoderConfig
    tiling: TilingConfig
    stain: StainConfig
    teacher: TrainConfig
    student: TrainConfig
    scoring: ScoringConfig
    synth: SynthConfig

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every stage's seed (the CLI --seed flag)."""
        return PipelineConfig(
            model=self.model,
            tiling=self.tiling,
            stain=self.stain,
            teacher=replace(self.teacher, seed=seed),
            student=replace(self.student, seed=seed),
            scoring=replace(self.scoring, seed=seed),
            synth=replace(self.synth, seed=seed),
        )


_SECTIONS = {
    "model": EncoderConfig,
    "tiling": TilingConfig,
    "stain": StainConfig,
    "teacher": TrainConfig,
    "student": TrainConfig,
    "scoring": ScoringConfig,
    "synth": SynthConfig,
}


def _parse_value(section: str, key: str, raw: str, annotation):
    raw = raw.strip()
    try:
        if annotation == "int":
            return int(raw)
        if annotation == "float":
            return float(raw)
        if annotation == "bool":
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if annotation == "str":
            return raw
        if annotation.startswith("tuple"):
            return tuple(float(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None
    raise ConfigError(f"[{section}] {key}: unsupported option type {annotation}")


def load_pipeline_config(path: str | Path | None = None,
                         seed: int | None = None) -> PipelineConfig:
    """Defaults, overlaid with an optional config file, overlaid with the
    optional seed override."""
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            cls = _SECTIONS[section]
            known = {f.name: f.type for f in fields(cls)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[section][key] = _parse_value(section, key, raw, str(known[key]))

    def build(section: str):
        cls = _SECTIONS[section]
        try:
            return cls(**values[section])
        except ValueError as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from exc

    config = PipelineConfig(
        model=build("model"),
        tiling=build("tiling"),
        stain=build("stain"),
        teacher=build("teacher"),
        student=build("student"),
        scoring=build("scoring"),
        synth=build("synth"),
    )
    if seed is not None:
        config = config.with_seed(seed)
    return config
