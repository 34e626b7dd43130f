"""gACC / pACC / zACC and the per-run metrics report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import COUNTERS, ContractError
from .datasets import ClientDataset, Dataset
from .embedding import collapse_metric

HISTORY_FIELDS = ("round", "loss", "ce", "penalty", "gacc", "pacc", "zacc")


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("accuracy over an empty set")
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))


Predictor = Callable[[np.ndarray], np.ndarray]


def evaluate_gacc(predict: Predictor, dataset: Dataset, indices) -> float:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractError("global test set is empty")
    return accuracy(predict(dataset.features[idx]), dataset.labels[idx])


def per_client_accuracy(predict_for: Callable[[ClientDataset], Predictor], dataset: Dataset,
                        clients: Sequence[ClientDataset]) -> list[float]:
    accs = []
    for c in clients:
        idx = c.eval_indices
        if idx.size == 0:
            raise ContractError(f"client {c.client_id} has an empty evaluation split")
        accs.append(accuracy(predict_for(c)(dataset.features[idx]), dataset.labels[idx]))
    return accs


def evaluate_pacc(predict_for, dataset: Dataset, clients: Sequence[ClientDataset]) -> tuple[float, list[float]]:
    """Unweighted mean of per-client accuracies on their local test splits."""
    accs = per_client_accuracy(predict_for, dataset, clients)
    return float(np.mean(accs)), accs


def evaluate_zacc(predict_for, dataset: Dataset, clients: Sequence[ClientDataset],
                  frozen: Sequence[np.ndarray] = ()) -> tuple[float, list[float]]:
    """Zero-shot accuracy on non-participating clients' whole shares.

    Asserts that no backward pass ran and that none of the ``frozen`` parameter
    arrays changed while evaluating.
    """
    if not clients:
        raise ContractError("zACC needs at least one non-participating client")
    before_bw = COUNTERS.backward_calls
    snapshots = [a.copy() for a in frozen]
    accs = per_client_accuracy(predict_for, dataset, clients)
    if COUNTERS.backward_calls != before_bw:
        raise ContractError("zACC evaluation ran a gradient computation")
    if any(not np.array_equal(a, s) for a, s in zip(frozen, snapshots)):
        raise ContractError("zACC evaluation modified model parameters")
    return float(np.mean(accs)), accs


@dataclass
class MetricsReport:
    gacc: float
    pacc: float
    zacc: float
    pacc_per_client: list[float]
    zacc_per_client: list[float]
    history: list[dict] = field(default_factory=list)
    fingerprint: str = ""
    collapse: float | None = None
    passes_per_round: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name in ("gacc", "pacc", "zacc"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 100.0):
                raise ContractError(f"{name}={v} outside [0, 100]")

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fingerprint",) + HISTORY_FIELDS)
        for row in self.history:
            w.writerow([self.fingerprint] + [_fmt(row.get(k)) for k in HISTORY_FIELDS])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "gacc": self.gacc, "pacc": self.pacc, "zacc": self.zacc,
            "pacc_per_client": self.pacc_per_client, "zacc_per_client": self.zacc_per_client,
            "collapse": self.collapse,
            "history": self.history,
        }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def embedding_collapse(embed: Callable[[np.ndarray], np.ndarray], dataset: Dataset,
                       clients: Sequence[ClientDataset]) -> float:
    """collapse_metric over eval-mode embeddings of each client's training share."""
    return collapse_metric([embed(dataset.features[c.train]) for c in clients])
