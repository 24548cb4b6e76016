"""Run configuration shared by coordination, reliability, and training."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .errors import ConfigError

DEFAULT_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001)


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 7
    batch_size: int = 50
    epochs: int = 3
    alpha0: float = 0.9
    lr: float = 1e-3
    encoder_hidden: int | None = None  # None: feature dim
    classifier_hidden: int | None = None  # None: encoder width
    grid: tuple[float, ...] = DEFAULT_GRID
    repeats: int = 5
    agreement_threshold: float = 0.005
    medium_enabled: bool = True
    medium_weight: float = 1.0

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.alpha0 < 0:
            raise ConfigError(f"alpha0 must be >= 0, got {self.alpha0}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not self.grid or len(set(self.grid)) != len(self.grid):
            raise ConfigError("grid must be non-empty with distinct values")
        if any(v < 0 for v in self.grid):
            raise ConfigError("grid values must be >= 0")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.medium_weight < 0:
            raise ConfigError(f"medium_weight must be >= 0, got {self.medium_weight}")
        for width in (self.encoder_hidden, self.classifier_hidden):
            if width is not None and width < 1:
                raise ConfigError(f"hidden widths must be >= 1, got {width}")

    def encoder_width(self, feature_dim: int) -> int:
        return self.encoder_hidden if self.encoder_hidden is not None else feature_dim

    def classifier_width(self, feature_dim: int) -> int:
        if self.classifier_hidden is not None:
            return self.classifier_hidden
        return self.encoder_width(feature_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def load_config(path: str | Path | None, seed_override: int | None = None) -> TrainConfig:
    """Read a config JSON file (missing path means all defaults)."""
    if path is None:
        cfg = TrainConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed config JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        if "grid" in raw:
            raw["grid"] = tuple(raw["grid"])
        cfg = TrainConfig(**raw)
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override)
    cfg.validate()
    return cfg
