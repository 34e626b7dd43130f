"""Datasets, non-i.i.d. Dirichlet partitioning and partition files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PARTITION_VERSION = 1


class FormatError(ValueError):
    """A data or partition file does not match its expected layout."""


class PartitionInfeasible(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[1] == 0:
            raise FormatError(f"features must be 2-d with positive width, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise FormatError("labels and features disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.size)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    n_participating: int
    alpha_d: float
    seed: int
    min_per_client: int = 1

    def __post_init__(self):
        self.client_indices = [np.asarray(ix, dtype=np.int64) for ix in self.client_indices]
        self.validate()

    @property
    def participating(self) -> list[np.ndarray]:
        return self.client_indices[:self.n_participating]

    @property
    def non_participating(self) -> list[np.ndarray]:
        return self.client_indices[self.n_participating:]

    @property
    def m_nonparticipating(self) -> int:
        return len(self.client_indices) - self.n_participating

    def validate(self):
        if not self.client_indices:
            raise FormatError("partition has no clients")
        if not 0 < self.n_participating <= len(self.client_indices):
            raise FormatError(f"n_participating={self.n_participating} inconsistent with "
                              f"{len(self.client_indices)} clients")
        for cid, ix in enumerate(self.client_indices):
            if ix.size == 0:
                raise FormatError(f"client {cid} has no samples")
        flat = np.concatenate(self.client_indices)
        if np.unique(flat).size != flat.size:
            raise FormatError("client index sets overlap")

    def __eq__(self, other):
        if not isinstance(other, Partition):
            return NotImplemented
        return (self.n_participating == other.n_participating and self.alpha_d == other.alpha_d
                and self.seed == other.seed and self.min_per_client == other.min_per_client
                and len(self.client_indices) == len(other.client_indices)
                and all(np.array_equal(a, b) for a, b in zip(self.client_indices, other.client_indices)))


@dataclass
class ClientDataset:
    client_id: int
    train: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    participating: bool = True

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)
        if np.intersect1d(self.train, self.test).size:
            raise SplitError(f"client {self.client_id}: train and test overlap")

    @property
    def eval_indices(self) -> np.ndarray:
        """Local test split for participating clients, the whole share otherwise."""
        return self.test if self.participating else self.train

    @property
    def size(self) -> int:
        return int(self.train.size)


# IDX files

def _read_header(buf: bytes, path, expected_magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return struct.unpack(f">{ndims}I", buf[4:need])


def read_idx_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    count, rows, cols = _read_header(buf, path, IDX_IMAGES_MAGIC, 3)
    body = buf[16:]
    if len(body) != count * rows * cols:
        raise FormatError(f"{path}: pixel data has {len(body)} bytes, header implies {count * rows * cols}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (count,) = _read_header(buf, path, IDX_LABELS_MAGIC, 1)
    body = buf[8:]
    if len(body) != count:
        raise FormatError(f"{path}: label data has {len(body)} bytes, header count is {count}")
    return np.frombuffer(body, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c))
        fh.write(images.tobytes(order="C"))


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels.astype(np.int64), num_classes)


# synthetic data

def synth_shifted(num_classes: int, samples_per_class: int, feature_dim: int,
                  class_center_spread: float, seed: int, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs, one per class, centres ~ spread * N(0, I)."""
    if min(num_classes, samples_per_class, feature_dim) <= 0:
        raise ValueError("num_classes, samples_per_class and feature_dim must be positive")
    gen = RngStream(seed, purpose="synth").generator()
    centers = class_center_spread * gen.standard_normal((num_classes, feature_dim))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = centers[labels] + noise * gen.standard_normal((labels.size, feature_dim))
    return Dataset(features, labels, num_classes)


def holdout_split(n_samples: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle ``range(n_samples)`` and carve off an i.i.d. holdout; returns (pool, holdout)."""
    gen = RngStream(seed, purpose="holdout").generator()
    perm = gen.permutation(n_samples)
    n_hold = int(round(fraction * n_samples))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


# partitioning

def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, n_participating: int, m_nonparticipating: int,
                        alpha_d: float, min_per_client: int = 10, seed: int = 0,
                        indices=None, max_retries: int = 100) -> Partition:
    """Split samples over N+M clients with per-class Dirichlet(alpha_d) proportions.

    Class c's samples are shuffled and handed out in consecutive blocks whose
    sizes come from largest-remainder rounding of the drawn proportions. The
    whole draw is repeated (fresh stream per attempt) until every client holds
    at least ``min_per_client`` samples.
    """
    n_clients = n_participating + m_nonparticipating
    if n_participating < 1 or m_nonparticipating < 0:
        raise ValueError("need n_participating >= 1 and m_nonparticipating >= 0")
    if alpha_d <= 0:
        raise ValueError("alpha_d must be positive")
    pool = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    if pool.size < n_clients * min_per_client:
        raise PartitionInfeasible(f"{pool.size} samples cannot give {n_clients} clients "
                                  f">= {min_per_client} each")
    labels = dataset.labels[pool]
    worst = (0, 0)
    for attempt in range(max_retries):
        gen = RngStream(seed, round=attempt, purpose="partition").generator()
        buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for c in range(dataset.num_classes):
            members = pool[labels == c]
            if members.size == 0:
                continue
            members = members[gen.permutation(members.size)]
            props = gen.dirichlet(np.full(n_clients, alpha_d))
            bounds = np.concatenate([[0], np.cumsum(largest_remainder(members.size, props))])
            for k in range(n_clients):
                buckets[k].append(members[bounds[k]:bounds[k + 1]])
        sizes = [sum(b.size for b in bk) for bk in buckets]
        if min(sizes) >= min_per_client:
            return Partition([np.sort(np.concatenate(bk)) for bk in buckets], n_participating,
                             float(alpha_d), int(seed), int(min_per_client))
        worst = (int(np.argmin(sizes)), int(min(sizes)))
    raise PartitionInfeasible(f"after {max_retries} attempts client {worst[0]} still has only "
                              f"{worst[1]} samples (< {min_per_client})")


def split_client(client_indices, test_fraction: float, seed: int, client_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(client_indices, dtype=np.int64)
    if not 0 < test_fraction < 1:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if idx.size < 2:
        raise SplitError(f"client {client_id}: {idx.size} samples cannot be split")
    n_test = min(max(1, int(round(test_fraction * idx.size))), idx.size - 1)
    gen = RngStream(seed, client=client_id, purpose="split").generator()
    perm = idx[gen.permutation(idx.size)]
    return perm[n_test:], perm[:n_test]


def build_clients(partition: Partition, test_fraction: float = 0.2, seed: int = 0) -> tuple[list[ClientDataset], list[ClientDataset]]:
    """Participating clients get a train/test split; the others keep their whole share for evaluation."""
    part = []
    for cid, ix in enumerate(partition.participating):
        tr, te = split_client(ix, test_fraction, seed, client_id=cid)
        part.append(ClientDataset(cid, tr, te, participating=True))
    nonpart = [ClientDataset(partition.n_participating + j, ix, participating=False)
               for j, ix in enumerate(partition.non_participating)]
    return part, nonpart


# partition files

def save_partition(partition: Partition, path) -> None:
    doc = {
        "version": PARTITION_VERSION,
        "seed": partition.seed,
        "alpha_d": partition.alpha_d,
        "min_per_client": partition.min_per_client,
        "n_participating": partition.n_participating,
        "clients": [ix.tolist() for ix in partition.client_indices],
    }
    atomic_write_text(path, json.dumps(doc))


def load_partition(path) -> Partition:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed partition file ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: partition file must hold an object")
    if doc.get("version") != PARTITION_VERSION:
        raise FormatError(f"{path}: unsupported partition version {doc.get('version')!r}")
    try:
        clients = doc["clients"]
        if not clients:
            raise FormatError(f"{path}: empty client list")
        return Partition([np.asarray(c, dtype=np.int64) for c in clients], int(doc["n_participating"]),
                         float(doc["alpha_d"]), int(doc["seed"]), int(doc.get("min_per_client", 1)))
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
