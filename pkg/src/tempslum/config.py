"""Run configuration, stored as YAML."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import NetConfig
from .segmenter import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    rasters: str = "rasters"
    manifest: str = "manifest.jsonl"
    out: str = "run"


@dataclass
class TilingConfig:
    window: int = 256
    overlap: int = 56


@dataclass
class SeedConfig:
    iou_max: float = 0.2
    min_area: float = 0.05
    min_nucleation: float = 0.5
    builtup_threshold: float = 0.5


@dataclass
class LabelConfig:
    image_threshold: float = 0.05
    area_threshold: float = 0.05
    prob_threshold: float = 0.5


@dataclass
class ExportConfig:
    # features below uncertain_factor * area_threshold are marked "uncertain"
    uncertain_factor: float = 2.0


_SECTIONS = {
    "paths": PathsConfig,
    "tiling": TilingConfig,
    "seeds": SeedConfig,
    "labels": LabelConfig,
    "export": ExportConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    labels: LabelConfig = field(default_factory=LabelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    K: int = 30
    max_iterations: int = 50
    starvation_limit: int = 3
    rng_seed: int = 0

    def train_config(self) -> TrainConfig:
        d = self.train.to_json()
        d["rng_seed"] = self.rng_seed
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        train = self.train.to_json()
        train.pop("rng_seed")
        out["train"] = train
        out.update(K=self.K, max_iterations=self.max_iterations, starvation_limit=self.starvation_limit, rng_seed=self.rng_seed)
        return out

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        kw: dict[str, Any] = {}
        try:
            for name, typ in _SECTIONS.items():
                kw[name] = _build(typ, d.pop(name, None) or {}, name)
            train = dict(d.pop("train", None) or {})
            net = _build(NetConfig, train.pop("net", None) or {}, "train.net")
            train.pop("rng_seed", None)
            kw["train"] = _build(TrainConfig, train, "train")
            kw["train"].net = net
            for key in ("K", "max_iterations", "starvation_limit", "rng_seed"):
                if key in d:
                    kw[key] = int(d.pop(key))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        cfg = cls(**kw)
        cfg.train.rng_seed = cfg.rng_seed
        return cfg

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump())
        return path

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = cls.from_dict(data)
        cfg._base = Path(path).resolve().parent
        return cfg

    def resolve(self, p: str) -> Path:
        """Resolve a configured path relative to the config file's directory."""
        path = Path(p)
        if path.is_absolute():
            return path
        return getattr(self, "_base", Path.cwd()) / path


def _build(typ, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return typ(**conv)
