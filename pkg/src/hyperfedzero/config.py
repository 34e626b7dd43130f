"""Experiment configuration: one flat key/value schema shared by the library and the CLI.

Config files are YAML mappings whose keys are the field names of
:class:`FLConfig`; unknown keys are rejected. Command-line overrides use the
same names as ``key=value`` pairs, with values parsed as YAML scalars or
flow lists (``classifier_hidden=[32,32]``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

METHODS = ("hyperfedzero", "fedavg", "fedavg_ft", "local", "opt1")


class ConfigError(ValueError):
    pass


@dataclass
class FLConfig:
    # federation
    method: str = "hyperfedzero"
    num_participating: int = 10
    num_nonparticipating: int = 5
    rounds: int = 50
    local_iters: int = 5
    lr: float = 0.02
    batch_size: int = 64
    seed: int = 0
    workers: int = 1
    eval_interval: int = 10
    # data
    dataset: str = "synthetic"
    num_classes: int = 4
    samples_per_class: int = 1500
    feature_dim: int = 2
    class_center_spread: float = 2.0
    blob_noise: float = 1.0
    data_seed: int | None = None
    idx_images: str | None = None
    idx_labels: str | None = None
    partition_file: str | None = None
    alpha_d: float = 0.1
    min_per_client: int = 10
    holdout_fraction: float = 0.1
    test_fraction: float = 0.2
    # embeddings and penalty
    embed_dim: int = 16
    alpha: float = 1.0
    beta: float = 1.0
    noise_mode: str = "per_dim"
    extractor_hidden: list[int] = field(default_factory=lambda: [32])
    # classifier and hypernetwork
    classifier_hidden: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    chunk_size: int = 64
    chunk_dim: int = 8
    hypernet_hidden: list[int] = field(default_factory=lambda: [32])
    hypernet_final_scale: float = 1.0
    hypernet_chunk_std: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        checks = [
            (self.num_participating >= 1, "num_participating >= 1"),
            (self.num_nonparticipating >= 0, "num_nonparticipating >= 0"),
            (self.rounds >= 1, "rounds >= 1"),
            (self.local_iters >= 1, "local_iters >= 1"),
            (self.lr >= 0, "lr >= 0"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.workers >= 1, "workers >= 1"),
            (self.eval_interval >= 1, "eval_interval >= 1"),
            (self.alpha_d > 0, "alpha_d > 0"),
            (self.alpha >= 0 and self.beta >= 0, "alpha, beta >= 0"),
            (self.embed_dim >= 1, "embed_dim >= 1"),
            (self.chunk_size >= 1 and self.chunk_dim >= 1, "chunk_size, chunk_dim >= 1"),
            (0 < self.test_fraction < 1, "0 < test_fraction < 1"),
            (0 <= self.holdout_fraction < 1, "0 <= holdout_fraction < 1"),
            (self.dataset in ("synthetic", "idx"), "dataset in {synthetic, idx}"),
            (self.noise_mode in ("per_dim", "scalar"), "noise_mode in {per_dim, scalar}"),
            (self.activation in ("relu", "tanh"), "activation in {relu, tanh}"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"invalid config: expected {what}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            raise ConfigError("dataset 'idx' needs idx_images and idx_labels")

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "FLConfig":
        unknown = set(changes) - field_names()
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        types = {f.name: f.type for f in fields(FLConfig)}
        return dataclasses.replace(self, **{k: _coerce(k, types[k], v) for k, v in changes.items()})

    def fingerprint(self) -> str:
        """Short stable hash of every field, seed included."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _coerce(name: str, kind: str, value):
    # YAML 1.1 reads "1e-3" as a string, and ints should be accepted for floats
    if value is None or isinstance(value, bool):
        return value
    try:
        if kind == "float":
            return float(value)
        if kind == "int" and isinstance(value, (int, float, str)):
            as_float = float(value)
            if as_float != int(as_float):
                raise ValueError
            return int(as_float)
    except (TypeError, ValueError, OverflowError):
        raise ConfigError(f"field {name!r} expects {kind}, got {value!r}") from None
    return value


def field_names() -> set[str]:
    return {f.name for f in fields(FLConfig)}


def from_mapping(data: dict[str, Any], base: FLConfig | None = None) -> FLConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a key/value mapping")
    base = base or FLConfig()
    try:
        return base.replace(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, raw = pair.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key!r}: {exc}") from exc
    return out


def load_config(path, overrides: Sequence[str] = ()) -> FLConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    data.update(parse_overrides(overrides))
    return from_mapping(data)


def dump_config(cfg: FLConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
