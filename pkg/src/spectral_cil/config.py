"""Experiment configuration: defaults, JSON round-trip, and seed streams.

Every knob has an embedded default so a run is reproducible from the config
echo alone. Random streams are derived by name from the base seed, so each
randomness source (data, splits, init, batch order, exemplars, unit
reinitialization) is independent and stable across processes.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DEFAULT_CLASS_COUNTS

GRID_RHO_DEFAULT = (0.001, 0.1, 0.5)
GRID_MATURITY_DEFAULT = (500, 2000, 5000)


class ConfigError(ValueError):
    pass


def stream(seed, *keys):
    """Named deterministic generator: seed plus a path of str/int keys."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode()))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class ExperimentConfig:
    # data
    source: str = "synthetic"                  # synthetic | csv
    csv_path: str | None = None
    class_counts: list = field(
        default_factory=lambda: list(DEFAULT_CLASS_COUNTS))
    scale: float = 0.2                         # multiplies class counts
    bands: int = 128
    noise_sigma: float = 0.05
    snv: bool = True
    classes_per_task: int = 5
    split_ratios: tuple = (0.7, 0.15, 0.15)
    # network
    width_factor: float = 0.125                # multiplies channel widths
    dtype: str = "float32"
    # training
    epochs: int = 50
    batch_size: int = 256
    lr: float = 0.0001
    # strategies
    strategies: list = field(default_factory=lambda: [
        "retrain", "finetune", "lwf", "ewc", "replay", "icarl", "wa",
        "der", "foster", "memo"])
    lambda_ewc: float = 5000.0
    lambda_distill: float = 1.0
    temperature: float = 2.0
    exemplar_quota: int = 20
    selection_mode: str = "random"
    fisher_max_samples: int | None = None
    # continual backpropagation
    cb_enabled: bool = False
    cb_rho: float = 0.1
    cb_maturity: float = 2000
    cb_eta: float = 0.99
    grid_rho: list = field(default_factory=lambda: list(GRID_RHO_DEFAULT))
    grid_maturity: list = field(
        default_factory=lambda: list(GRID_MATURITY_DEFAULT))
    # experiment
    rounds: int = 5
    seed: int = 0
    out_dir: str = "results"
    workers: int = 1
    save_checkpoints: bool = True
    kde_points: int = 256

    def validate(self):
        if self.source not in ("synthetic", "csv"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("csv source requires csv_path")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios {self.split_ratios} must sum to 1")
        if not 0 < self.scale:
            raise ConfigError("scale must be positive")
        if self.epochs < 0 or self.rounds < 1 or self.batch_size < 1:
            raise ConfigError("epochs >= 0, rounds >= 1, batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        unknown = set(self.strategies) - {
            "finetune", "ewc", "lwf", "replay", "icarl", "wa", "der",
            "foster", "memo", "retrain"}
        if unknown:
            raise ConfigError(f"unknown strategies: {sorted(unknown)}")
        if not 0.0 <= self.cb_rho <= 1.0:
            raise ConfigError("cb_rho outside [0, 1]")
        if not 0.0 <= self.cb_eta < 1.0:
            raise ConfigError("cb_eta outside [0, 1)")
        if self.cb_maturity < 0:
            raise ConfigError("cb_maturity must be >= 0")
        if not self.grid_rho or not self.grid_maturity:
            raise ConfigError("grid values must be nonempty")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.split_ratios = tuple(cfg.split_ratios)
        return cfg.validate()

    @classmethod
    def from_json_file(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})")
        return cls.from_dict(data)

    def content_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()
