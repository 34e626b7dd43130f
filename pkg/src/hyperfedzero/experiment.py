"""Data preparation, single runs with on-disk artifacts, and ablation sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .config import ConfigError, FLConfig, field_names, from_mapping
from .datasets import (Dataset, Partition, atomic_write_text, dirichlet_partition, holdout_split,
                       load_idx, load_partition, synth_shifted)
from .federation import run_training, save_checkpoint
from .metrics import MetricsReport

RESULTS_ENV = "HYPERFEDZERO_RESULTS"


@dataclass
class PreparedData:
    dataset: Dataset
    holdout: np.ndarray
    partition: Partition


def load_dataset(cfg: FLConfig) -> Dataset:
    if cfg.dataset == "idx":
        return load_idx(cfg.idx_images, cfg.idx_labels)
    return synth_shifted(cfg.num_classes, cfg.samples_per_class, cfg.feature_dim, cfg.class_center_spread,
                         cfg.effective_data_seed, noise=cfg.blob_noise)


def prepare_data(cfg: FLConfig) -> PreparedData:
    """Dataset, an i.i.d. global holdout removed first, then a Dirichlet partition of the rest."""
    ds = load_dataset(cfg)
    pool, holdout = holdout_split(len(ds), cfg.holdout_fraction, cfg.effective_data_seed)
    if cfg.partition_file:
        part = load_partition(cfg.partition_file)
        if np.intersect1d(np.concatenate(part.client_indices), holdout).size:
            raise ConfigError("partition file overlaps the global holdout")
    else:
        part = dirichlet_partition(ds, cfg.num_participating, cfg.num_nonparticipating, cfg.alpha_d,
                                   cfg.min_per_client, cfg.seed, indices=pool)
    return PreparedData(ds, holdout, part)


def run_single(cfg: FLConfig, out_dir=None, data: PreparedData | None = None) -> MetricsReport:
    """Run one configuration; with ``out_dir`` write metrics CSV, JSON sidecar and checkpoint."""
    data = data or prepare_data(cfg)
    state, report = run_training(cfg, data.partition, data.dataset, data.holdout)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.json", state, cfg)
        atomic_write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        atomic_write_text(out / "report.json", json.dumps(report.to_dict(), indent=2))
        # metrics.csv last: its presence marks the run complete
        atomic_write_text(out / "metrics.csv", report.history_csv())
    return report


@dataclass
class ExperimentSpec:
    base: FLConfig
    sweep: dict[str, list[Any]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "results"
    jobs: int = 1

    def __post_init__(self):
        unknown = set(self.sweep) - field_names()
        if unknown:
            raise ConfigError(f"unknown sweep field(s): {sorted(unknown)}")
        if "seed" in self.sweep:
            raise ConfigError("sweep 'seed' through the seeds list, not as an axis")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def cells(self) -> list[dict[str, Any]]:
        axes = list(self.sweep)
        return [dict(zip(axes, combo)) for combo in itertools.product(*(self.sweep[a] for a in axes))]

    @classmethod
    def from_file(cls, path, overrides=()) -> "ExperimentSpec":
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.from_mapping(doc, overrides)

    @classmethod
    def from_mapping(cls, doc: dict, overrides=()) -> "ExperimentSpec":
        from .config import parse_overrides
        doc = dict(doc)
        sweep = doc.pop("sweep", {}) or {}
        seeds = doc.pop("seeds", [0, 1, 2])
        out_dir = doc.pop("out_dir", None) or os.environ.get(RESULTS_ENV, "results")
        jobs = int(doc.pop("jobs", 1))
        doc.update(parse_overrides(overrides))
        return cls(from_mapping(doc), sweep, list(seeds), str(out_dir), jobs)


def cell_fingerprint(cfg: FLConfig) -> str:
    """Hash of the configuration with the seed removed (identifies a table row)."""
    d = cfg.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _run_cell(cfg_dict: dict, run_dir: str) -> dict:
    cfg = from_mapping(cfg_dict)
    return run_single(cfg, run_dir).to_dict()


def _load_report(run_dir: Path) -> dict | None:
    if not (run_dir / "metrics.csv").is_file():
        return None
    return json.loads((run_dir / "report.json").read_text(encoding="utf-8"))


SUMMARY_METRICS = ("gacc", "pacc", "zacc", "collapse")


def run_experiment(spec: ExperimentSpec) -> tuple[list[dict], int]:
    """Run every sweep cell x seed (skipping finished runs); returns (table rows, new runs).

    Writes ``runs/<fingerprint>/`` per run and ``summary.csv`` with mean and
    standard deviation over seeds per cell.
    """
    out = Path(spec.out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    jobs = []
    for cell in spec.cells():
        for seed in spec.seeds:
            cfg = spec.base.replace(**cell, seed=seed)
            jobs.append((cell, cfg, out / "runs" / cfg.fingerprint()))
    todo = [(cfg, d) for _, cfg, d in jobs if _load_report(d) is None]
    if spec.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(spec.jobs) as ex:
            list(ex.map(_run_cell, [c.to_dict() for c, _ in todo], [str(d) for _, d in todo]))
    else:
        for cfg, d in todo:
            _run_cell(cfg.to_dict(), str(d))

    rows = []
    for cell in spec.cells():
        cell_jobs = [(cfg, d) for c, cfg, d in jobs if c == cell]
        reports = [_load_report(d) for _, d in cell_jobs]
        row = {"cell": cell_fingerprint(cell_jobs[0][0]), **{k: _scalar(v) for k, v in cell.items()},
               "n_seeds": len(reports)}
        for m in SUMMARY_METRICS:
            vals = [r[m] for r in reports if r.get(m) is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_std"] = float(np.std(vals)) if vals else None
        row["runs"] = ";".join(cfg.fingerprint() for cfg, _ in cell_jobs)
        rows.append(row)
    atomic_write_text(out / "summary.csv", rows_to_csv(rows))
    atomic_write_text(out / "experiment.json", json.dumps(
        {"base": spec.base.to_dict(), "sweep": spec.sweep, "seeds": spec.seeds}, indent=2))
    return rows, len(todo)


def _scalar(v):
    return json.dumps(v) if isinstance(v, (list, dict)) else v


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    keys = list(rows[0])
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in keys})
    return buf.getvalue()
