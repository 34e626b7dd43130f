"""Distribution embeddings: noisy extraction, the balancing penalty, collapse diagnostics."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import FlatParams, init_mlp, mlp_apply, mlp_manifest
from .rng import RngStream

NOISE_MODES = ("per_dim", "scalar")


@dataclass
class PenaltyConfig:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class ExtractorParams:
    """Main extractor and noisy network; both map feature_dim -> hidden -> P."""

    main: FlatParams
    noisy: FlatParams
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        for p in (self.main, self.noisy):
            if p.manifest != mlp_manifest(self.widths):
                raise ShapeError(f"{p.name} does not match extractor widths {self.widths}")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def init(cls, widths: Sequence[int], rng: RngStream, activation: str = "relu") -> "ExtractorParams":
        widths = tuple(widths)
        manifest = mlp_manifest(widths)
        main = init_mlp(widths, rng.child(purpose="init/extractor").generator())
        noisy = init_mlp(widths, rng.child(purpose="init/noisy").generator())
        return cls(FlatParams("extractor", main, manifest), FlatParams("noisy", noisy, manifest),
                   widths, activation)


def draw_noise(rng, batch: int, dim: int, mode: str = "per_dim") -> np.ndarray:
    """Standard-normal noise, one value per entry (B x P) or one per row broadcast over P."""
    if mode not in NOISE_MODES:
        raise ValueError(f"unknown noise mode {mode!r}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if mode == "scalar":
        return np.repeat(gen.standard_normal((batch, 1)), dim, axis=1)
    return gen.standard_normal((batch, dim))


def extract_tensors(x: Tensor, main: Tensor, noisy: Tensor | None, widths: Sequence[int],
                    noise: np.ndarray | None, activation: str = "relu") -> Tensor:
    """softmax(f(x) + z * softplus(noisy(x))); with ``noise=None`` just softmax(f(x))."""
    logits = mlp_apply(x, main, widths, activation)
    if noise is not None:
        if noise.shape != logits.shape:
            raise ShapeError(f"noise shape {noise.shape} != embedding logits {logits.shape}")
        logits = logits + Tensor(noise) * ad.softplus(mlp_apply(x, noisy, widths, activation))
    return ad.softmax(logits)


def extract(x, params: ExtractorParams, rng=None, train_mode: bool = False,
            noise_mode: str = "per_dim") -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"extract expects a non-empty B x feature_dim batch, got {x.shape}")
    if x.shape[1] != params.widths[0]:
        raise ShapeError(f"feature_dim {x.shape[1]} != extractor input {params.widths[0]}")
    noise = None
    if train_mode:
        if rng is None:
            raise ValueError("train-mode extraction needs a random stream")
        noise = draw_noise(rng, x.shape[0], params.dim, noise_mode)
    return extract_tensors(x, Tensor(params.main.values), Tensor(params.noisy.values),
                           params.widths, noise, params.activation)


def balancing_penalty(e, cfg: PenaltyConfig) -> Tensor:
    """alpha * var(s)/mean(s) + beta * mean_b(-sum_p e log e), s = column sums of e.

    ``var`` is the population variance over the P importance entries.
    """
    e = ad.as_tensor(e)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ShapeError(f"penalty expects a non-empty B x P embedding, got {e.shape}")
    importance = e.sum(axis=0)
    centred = importance - importance.mean()
    dispersion = (centred * centred).mean() / importance.mean()
    entropy = -(ad.xlogx(e).sum(axis=1)).mean()
    return cfg.alpha * dispersion + cfg.beta * entropy


def collapse_metric(per_client_embeddings: Sequence) -> float:
    """Mean pairwise Euclidean distance between per-client mean embeddings."""
    if len(per_client_embeddings) < 2:
        raise ValueError("collapse_metric needs at least two clients")
    means = []
    for e in per_client_embeddings:
        arr = e.data if isinstance(e, Tensor) else np.asarray(e, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("each client needs at least one embedding row")
        means.append(arr.mean(axis=0))
    dists = [float(np.linalg.norm(a - b)) for a, b in itertools.combinations(means, 2)]
    return float(np.mean(dists))


def export_embeddings(path, rows: Iterable[tuple[int, int, np.ndarray]]) -> int:
    """Write ``client_id,label,e_1..e_P`` rows; returns the number of rows written."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = None
        for client_id, label, e in rows:
            e = np.asarray(e, dtype=np.float64)
            if writer is None:
                writer = csv.writer(fh)
                writer.writerow(["client_id", "label"] + [f"e_{p + 1}" for p in range(e.size)])
            writer.writerow([int(client_id), int(label)] + [f"{v:.17g}" for v in e])
            n += 1
    return n
