"""Run configuration: one JSON file with ``model``, ``train`` and ``data`` sections."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Iterable

from .data import DataConfig
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "data")


def _section(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {section!r}: {exc}") from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        return cls(
            _section(ModelConfig, data.get("model", {}), "model"),
            _section(TrainConfig, data.get("train", {}), "train"),
            _section(DataConfig, data.get("data", {}), "data"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": dataclasses.asdict(self.data)}

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.augment_flags()
        return self

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, value = item.split("=", 1)
            parts = path.strip().split(".")
            if len(parts) != 2 or parts[0] not in SECTIONS:
                raise ConfigError(f"override key {path!r} must be one of "
                                  f"{'/'.join(SECTIONS)}.<field>")
            section, key = parts
            if key not in raw[section]:
                raise ConfigError(f"unknown key in {section!r}: {key}")
            try:
                raw[section][key] = json.loads(value)
            except json.JSONDecodeError:
                raw[section][key] = value
        return RunConfig.from_dict(raw)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def bundled_configs() -> Dict[str, Path]:
    root = resources.files("coswin") / "configs"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def load_run_config(path_or_name) -> RunConfig:
    """Load a JSON run config from a path, or by bundled name (e.g. ``mnist_desk``)."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = bundled_configs()
        if str(path_or_name) in bundled:
            path = bundled[str(path_or_name)]
        else:
            raise FileNotFoundError(f"config {path_or_name} not found "
                                    f"(bundled: {', '.join(sorted(bundled))})")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(data)


__all__ = ["RunConfig", "SECTIONS", "bundled_configs", "load_run_config"]
