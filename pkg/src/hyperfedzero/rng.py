"""Label-addressed random streams.

A stream is identified by ``(seed, client, round, purpose)``; each identity maps
to its own Philox counter-based generator through ``numpy.random.SeedSequence``
spawn keys. Streams hold no shared state, so two workers asking for the same
label get the same numbers regardless of scheduling order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor

SERVER = -1


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    seed: int
    client: int = SERVER
    round: int = 0
    purpose: str = "default"

    def __post_init__(self):
        if self.client < SERVER or self.round < 0:
            raise ValueError(f"invalid stream label client={self.client} round={self.round}")

    @property
    def label(self) -> tuple[int, int, str]:
        return (self.client, self.round, self.purpose)

    def child(self, **changes) -> "RngStream":
        return replace(self, **changes)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=int(self.seed) & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(self.client + 1, self.round, _purpose_code(self.purpose)),
        )
        return np.random.Generator(np.random.Philox(ss))


def gaussian(rng: "RngStream | np.random.Generator", shape) -> Tensor:
    """Standard-normal draws as a constant tensor."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return Tensor(gen.standard_normal(shape))
