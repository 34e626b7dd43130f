"""Chunked hypernetwork that emits a classifier's flat parameter vector.

For chunk j, the trunk MLP receives ``[e || chunk_embedding_j]`` and emits
``chunk_size`` values; the chunks are concatenated in order and the tail
padding is dropped so exactly ``total_params`` values remain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .params import (FlatParams, init_mlp, mlp_apply, mlp_apply_per_sample, mlp_manifest,
                     mlp_param_count)
from .rng import RngStream


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierArch:
    widths: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ShapeError(f"invalid classifier widths {self.widths}")

    @property
    def total_params(self) -> int:
        return mlp_param_count(self.widths)

    @property
    def manifest(self):
        return mlp_manifest(self.widths)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def flatten(self, arrays: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[k], dtype=np.float64).reshape(-1) for k, _ in self.manifest])

    def unflatten(self, vec) -> dict[str, np.ndarray]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_params,):
            raise ShapeError(f"expected {self.total_params} parameters, got {vec.shape}")
        return FlatParams("classifier", vec, self.manifest).unflatten()

    def init(self, rng: RngStream) -> FlatParams:
        return FlatParams("classifier", init_mlp(self.widths, rng.child(purpose="init/classifier").generator()),
                          self.manifest)


def chunk_layout(total_params: int, chunk_size: int) -> tuple[int, int]:
    """Return ``(num_chunks, padding)`` for covering ``total_params`` with ``chunk_size`` pieces."""
    if total_params < 1 or chunk_size < 1:
        raise LayoutError("total_params and chunk_size must be positive")
    n = -(-total_params // chunk_size)
    return n, n * chunk_size - total_params


@dataclass(frozen=True)
class HypernetConfig:
    chunk_size: int = 64
    chunk_dim: int = 8
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    final_scale: float = 1.0
    chunk_init_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class HypernetParams:
    """Everything in theta_h: chunk embeddings first, then the trunk MLP."""

    theta: FlatParams
    embed_dim: int
    num_chunks: int
    cfg: HypernetConfig

    @property
    def trunk_widths(self) -> tuple[int, ...]:
        return (self.embed_dim + self.cfg.chunk_dim, *self.cfg.hidden, self.cfg.chunk_size)

    @property
    def chunk_block(self) -> int:
        return self.num_chunks * self.cfg.chunk_dim

    @staticmethod
    def manifest_for(embed_dim: int, num_chunks: int, cfg: HypernetConfig):
        trunk = (embed_dim + cfg.chunk_dim, *cfg.hidden, cfg.chunk_size)
        return (("chunk_embeddings", (num_chunks, cfg.chunk_dim)),) + mlp_manifest(trunk, prefix="trunk.")

    @classmethod
    def init(cls, arch: ClassifierArch, embed_dim: int, cfg: HypernetConfig, rng: RngStream) -> "HypernetParams":
        num_chunks, _ = chunk_layout(arch.total_params, cfg.chunk_size)
        chunks = cfg.chunk_init_std * rng.child(purpose="init/chunks").generator().standard_normal(
            num_chunks * cfg.chunk_dim)
        trunk = init_mlp((embed_dim + cfg.chunk_dim, *cfg.hidden, cfg.chunk_size),
                         rng.child(purpose="init/trunk").generator(), final_scale=cfg.final_scale)
        theta = FlatParams("hypernet", np.concatenate([chunks, trunk]),
                           cls.manifest_for(embed_dim, num_chunks, cfg))
        return cls(theta, embed_dim, num_chunks, cfg)

    def with_theta(self, theta: FlatParams) -> "HypernetParams":
        return HypernetParams(theta, self.embed_dim, self.num_chunks, self.cfg)

    def check(self, arch: ClassifierArch):
        n, _ = chunk_layout(arch.total_params, self.cfg.chunk_size)
        if n != self.num_chunks:
            raise LayoutError(f"hypernet has {self.num_chunks} chunks, classifier needs {n}")
        if self.theta.manifest != self.manifest_for(self.embed_dim, self.num_chunks, self.cfg):
            raise LayoutError("hypernet parameter manifest does not match its configuration")


def generate_tensors(e: Tensor, theta_h: Tensor, hp: HypernetParams, arch: ClassifierArch,
                     trunk_hook: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Per-row classifier parameters (B x total_params) for embeddings ``e`` (B x P)."""
    if e.ndim != 2 or e.shape[1] != hp.embed_dim:
        raise ShapeError(f"embedding batch {e.shape} does not match P={hp.embed_dim}")
    b, p = e.shape
    j, d, c = hp.num_chunks, hp.cfg.chunk_dim, hp.cfg.chunk_size
    chunks = theta_h[0:hp.chunk_block].reshape(1, j, d)
    inp = ad.concat([ad.broadcast_to(e.reshape(b, 1, p), (b, j, p)),
                     ad.broadcast_to(chunks, (b, j, d))], axis=-1)
    out = mlp_apply(inp, theta_h, hp.trunk_widths, hp.cfg.activation, start=hp.chunk_block)
    if trunk_hook is not None:
        out = trunk_hook(out)
    return out.reshape(b, j * c)[:, :arch.total_params]


def generate(e_row, params: HypernetParams, arch: ClassifierArch) -> np.ndarray:
    """Generated parameter vector for a single embedding row (or rows, if 2-d)."""
    params.check(arch)
    e = np.asarray(e_row.data if isinstance(e_row, Tensor) else e_row, dtype=np.float64)
    single = e.ndim == 1
    gen = generate_tensors(Tensor(np.atleast_2d(e)), Tensor(params.theta.values), params, arch)
    return gen.data[0] if single else gen.data


def forward_generated(x, gen, arch: ClassifierArch) -> Tensor:
    """Logits where each input row runs through its own generated classifier."""
    x, gen = ad.as_tensor(x), ad.as_tensor(gen)
    if x.ndim == 1:
        x, gen = x.reshape(1, x.shape[0]), gen.reshape(1, gen.shape[0])
        return mlp_apply_per_sample(x, gen, arch.widths, arch.activation).reshape(arch.num_classes)
    return mlp_apply_per_sample(x, gen, arch.widths, arch.activation)


def forward_opt1(x, e, theta_c, arch_aug: ClassifierArch) -> Tensor:
    """Shared classifier on the concatenated input ``[x || e]``."""
    x, e = ad.as_tensor(x), ad.as_tensor(e)
    theta = ad.as_tensor(theta_c.values if isinstance(theta_c, FlatParams) else theta_c)
    squeeze = x.ndim == 1
    if squeeze:
        x, e = x.reshape(1, x.shape[0]), e.reshape(1, e.shape[0])
    if x.shape[1] + e.shape[1] != arch_aug.in_dim:
        raise ShapeError(f"[x || e] width {x.shape[1] + e.shape[1]} != classifier input {arch_aug.in_dim}")
    out = mlp_apply(ad.concat([x, e], axis=1), theta, arch_aug.widths, arch_aug.activation)
    return out.reshape(arch_aug.num_classes) if squeeze else out


def hypernet_param_count(total_params: int, embed_dim: int, cfg: HypernetConfig) -> int:
    num_chunks, _ = chunk_layout(total_params, cfg.chunk_size)
    return num_chunks * cfg.chunk_dim + mlp_param_count((embed_dim + cfg.chunk_dim, *cfg.hidden, cfg.chunk_size))


def param_budget(arch: ClassifierArch, extractor_widths: Sequence[int], hypernet_cfg: HypernetConfig) -> dict:
    """Parameter counts of the generating side (extractor + noisy net + hypernet) against the classifier."""
    extractor = mlp_param_count(extractor_widths)
    hyper = hypernet_param_count(arch.total_params, extractor_widths[-1], hypernet_cfg)
    generating = 2 * extractor + hyper
    classifier = arch.total_params
    num_chunks, padding = chunk_layout(classifier, hypernet_cfg.chunk_size)
    return {
        "extractor": extractor,
        "noisy": extractor,
        "hypernet": hyper,
        "generating_total": generating,
        "classifier": classifier,
        "ratio": generating / classifier,
        "num_chunks": num_chunks,
        "padding": padding,
    }
