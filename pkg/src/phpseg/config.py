"""Run configuration: one JSON file, overridable from the command line."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .forest import ForestConfig
from .homology import Filtration, default_filtration
from .imaging import DEFAULT_C_MAX, StainMatrix
from .segmenter import FastConfig

CONFIG_ENV = "PHPSEG_CONFIG"


@dataclass(frozen=True)
class Config:
    thresholds: tuple[int, ...] = field(default_factory=lambda: default_filtration().thresholds)
    stain_matrix: str | None = None
    c_max: float = DEFAULT_C_MAX
    fast: FastConfig = field(default_factory=FastConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    seed: int = 0
    literal_complement: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        Filtration(self.thresholds)
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.c_max > 0:
            raise ConfigError(f"c_max must be positive, got {self.c_max}")

    @property
    def filtration(self) -> Filtration:
        return Filtration(self.thresholds)

    def stains(self) -> StainMatrix:
        return StainMatrix.from_json(self.stain_matrix) if self.stain_matrix else StainMatrix.ruifrok()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, data: dict, source: str = "config") -> "Config":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        _reject_unknown(data, cls, source)
        kw = dict(data)
        if "thresholds" in kw:
            kw["thresholds"] = tuple(kw["thresholds"])
        for key, sub in (("fast", FastConfig), ("forest", ForestConfig)):
            if key in kw:
                if not isinstance(kw[key], dict):
                    raise ConfigError(f"{source}: '{key}' must be an object")
                _reject_unknown(kw[key], sub, f"{source}:{key}")
                kw[key] = sub(**kw[key])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"{source}: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "Config":
        """Read ``path``, else the file named by ``$PHPSEG_CONFIG``, else defaults."""
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_dict(data, str(path))
        if cfg.stain_matrix and not os.path.isabs(cfg.stain_matrix):
            cfg = replace(cfg, stain_matrix=str(Path(path).parent / cfg.stain_matrix))
        return cfg


def _reject_unknown(data: dict, cls, source: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}; allowed: {sorted(known)}")
