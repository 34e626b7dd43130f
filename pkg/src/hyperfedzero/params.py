"""Flat parameter vectors and the MLP layout shared by every network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass
class FlatParams:
    """A named flat float64 vector plus the shapes it unpacks into."""

    name: str
    values: np.ndarray
    manifest: tuple[tuple[str, tuple[int, ...]], ...] = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.manifest = tuple((str(k), tuple(int(n) for n in s)) for k, s in self.manifest)
        expected = sum(int(np.prod(s)) for _, s in self.manifest)
        if self.manifest and expected != self.values.size:
            raise ShapeError(f"{self.name}: manifest covers {expected} values, vector has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ad.NonFiniteError(f"{self.name}: non-finite parameter")

    @property
    def size(self) -> int:
        return int(self.values.size)

    def copy(self) -> "FlatParams":
        return FlatParams(self.name, self.values.copy(), self.manifest)

    def with_values(self, values) -> "FlatParams":
        return FlatParams(self.name, values, self.manifest)

    def freeze(self) -> "FlatParams":
        self.values.flags.writeable = False
        return self

    def unflatten(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for key, shape in self.manifest:
            n = int(np.prod(shape))
            out[key] = self.values[pos:pos + n].reshape(shape)
            pos += n
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "manifest": [[k, list(s)] for k, s in self.manifest],
                "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FlatParams":
        return cls(d["name"], np.array(d["values"], dtype=np.float64),
                   tuple((k, tuple(s)) for k, s in d["manifest"]))


ParamBundle = dict  # group name -> FlatParams


def bundle_copy(bundle: ParamBundle) -> ParamBundle:
    return {k: v.copy() for k, v in bundle.items()}


def bundle_size(bundle: ParamBundle) -> int:
    return sum(p.size for p in bundle.values())


# MLP layout: per layer, weight (in x out, row-major) then bias (out,)

def mlp_manifest(widths: Sequence[int], prefix: str = "") -> tuple[tuple[str, tuple[int, ...]], ...]:
    if len(widths) < 2:
        raise ShapeError(f"an MLP needs at least input and output widths, got {list(widths)}")
    items = []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        items.append((f"{prefix}layer{i}.weight", (n_in, n_out)))
        items.append((f"{prefix}layer{i}.bias", (n_out,)))
    return tuple(items)


def mlp_param_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def mlp_offsets(widths: Sequence[int], start: int = 0):
    """Yield ``(w_start, w_end, b_end, n_in, n_out)`` per layer."""
    pos = start
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        w_end = pos + n_in * n_out
        b_end = w_end + n_out
        yield pos, w_end, b_end, n_in, n_out
        pos = b_end


def init_mlp(widths: Sequence[int], gen: np.random.Generator, final_scale: float = 1.0) -> np.ndarray:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), for weights and biases."""
    chunks = []
    n_layers = len(widths) - 1
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(n_in)
        scale = final_scale if i == n_layers - 1 else 1.0
        chunks.append(gen.uniform(-bound, bound, size=n_in * n_out) * scale)
        chunks.append(gen.uniform(-bound, bound, size=n_out) * scale)
    return np.concatenate(chunks)


def mlp_apply(x: Tensor, flat: Tensor, widths: Sequence[int], activation: str = "relu", start: int = 0) -> Tensor:
    """Shared-weight MLP whose parameters live in ``flat[start:]``; x is (..., widths[0])."""
    if x.shape[-1] != widths[0]:
        raise ShapeError(f"input width {x.shape[-1]} != expected {widths[0]}")
    act = ACTIVATIONS[activation]
    layers = list(mlp_offsets(widths, start))
    lead = x.shape[:-1]
    # one 2-d GEMM per layer instead of a batched loop
    h = x.reshape(-1, widths[0]) if x.ndim != 2 else x
    for i, (ws, we, be, n_in, n_out) in enumerate(layers):
        w = flat[ws:we].reshape(n_in, n_out)
        h = h @ w + flat[we:be]
        if i < len(layers) - 1:
            h = act(h)
    return h.reshape(*lead, widths[-1]) if x.ndim != 2 else h


def mlp_apply_per_sample(x: Tensor, gen: Tensor, widths: Sequence[int], activation: str = "relu") -> Tensor:
    """MLP where row b of ``x`` (B x in) uses its own parameter vector ``gen[b]``."""
    b = x.shape[0]
    if gen.shape != (b, mlp_param_count(widths)):
        raise ShapeError(f"generated params {gen.shape} do not match batch {b} x {mlp_param_count(widths)}")
    if x.shape[-1] != widths[0]:
        raise ShapeError(f"input width {x.shape[-1]} != expected {widths[0]}")
    act = ACTIVATIONS[activation]
    layers = list(mlp_offsets(widths))
    h = x.reshape(b, 1, widths[0])
    for i, (ws, we, be, n_in, n_out) in enumerate(layers):
        w = gen[:, ws:we].reshape(b, n_in, n_out)
        h = h @ w + gen[:, we:be].reshape(b, 1, n_out)
        if i < len(layers) - 1:
            h = act(h)
    return h.reshape(b, widths[-1])
