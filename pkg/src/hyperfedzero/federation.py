"""Client local training, server aggregation and the round loop.

Each client in round ``r`` draws its mini-batches from the stream
``(seed, client, r, "batch")`` and its embedding noise from
``(seed, client, r, "noise")``, so the outcome of a round does not depend on
the order (or concurrency) in which clients are processed.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .config import FLConfig, from_mapping
from .datasets import ClientDataset, Dataset, Partition, atomic_write_text, build_clients
from .metrics import (HISTORY_FIELDS, MetricsReport, embedding_collapse, evaluate_gacc, evaluate_pacc,
                      evaluate_zacc)
from .models import ClassifierModel, build_model, check_bundle
from .params import FlatParams, ParamBundle, bundle_copy
from .rng import RngStream

CHECKPOINT_VERSION = 1


class AggregationError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


class PassCounters:
    """Counts of training/evaluation work, used to check the equal-work claim."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        self.train_forward = 0
        self.train_backward = 0
        self.finetune_calls = 0

    def add(self, **deltas):
        with self._lock:
            for k, v in deltas.items():
                setattr(self, k, getattr(self, k) + v)

    def snapshot(self) -> dict:
        with self._lock:
            return {"train_forward": self.train_forward, "train_backward": self.train_backward,
                    "finetune_calls": self.finetune_calls}


PASSES = PassCounters()


@dataclass
class TrainStepReport:
    loss: float
    ce: float
    penalty: float
    grad_norms: dict[str, float]


@dataclass
class GlobalState:
    round: int
    params: ParamBundle
    method: str
    client_params: list[ParamBundle] | None = None
    history: list[dict] = field(default_factory=list)


# aggregation

def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise AggregationError("client sizes must be positive")
    return sizes / sizes.sum()


def aggregate(client_params: list[ParamBundle], sizes) -> ParamBundle:
    """Size-weighted average of each parameter group, accumulated in client order."""
    if not client_params:
        raise AggregationError("nothing to aggregate")
    w = aggregation_weights(sizes)
    if len(w) != len(client_params):
        raise AggregationError(f"{len(client_params)} bundles but {len(w)} sizes")
    ref = client_params[0]
    out = {}
    for name, proto in ref.items():
        acc = np.zeros_like(proto.values)
        for wi, bundle in zip(w, client_params):
            p = bundle.get(name)
            if p is None or p.values.shape != proto.values.shape or p.manifest != proto.manifest:
                raise AggregationError(f"group {name!r} has mismatched shapes across clients")
            acc += wi * p.values
        out[name] = proto.with_values(acc)
    if any(set(b) != set(ref) for b in client_params):
        raise AggregationError("clients disagree on parameter groups")
    return out


# local training

def sgd_step(model, bundle: ParamBundle, x: np.ndarray, y: np.ndarray, lr: float,
             noise_gen) -> tuple[ParamBundle, TrainStepReport]:
    """One plain-SGD step on every parameter group at once; ``bundle`` is left untouched."""
    leaves = {k: Tensor(v.values, requires_grad=True) for k, v in bundle.items()}
    parts = model.loss(leaves, x, y, noise_gen)
    PASSES.add(train_forward=1)
    ad.backward(parts.loss)
    PASSES.add(train_backward=1)
    new = {k: v.with_values(v.values - lr * leaves[k].grad) for k, v in bundle.items()}
    report = TrainStepReport(parts.loss.item(), parts.ce.item(), parts.penalty.item(),
                             {k: float(np.linalg.norm(leaves[k].grad)) for k in bundle})
    return new, report


def local_train(model, bundle: ParamBundle, dataset: Dataset, client: ClientDataset, cfg: FLConfig,
                round_idx: int, purpose: str = "") -> tuple[ParamBundle, list[TrainStepReport]]:
    if client.train.size == 0:
        raise ad.ContractError(f"client {client.client_id} has no training data")
    batch_gen = RngStream(cfg.seed, client.client_id, round_idx, purpose + "batch").generator()
    noise_gen = RngStream(cfg.seed, client.client_id, round_idx, purpose + "noise").generator()
    n = client.train.size
    bs = min(cfg.batch_size, n)
    params = bundle_copy(bundle)
    reports = []
    for _ in range(cfg.local_iters):
        idx = client.train if bs == n else client.train[np.sort(batch_gen.choice(n, bs, replace=False))]
        params, rep = sgd_step(model, params, dataset.features[idx], dataset.labels[idx], cfg.lr, noise_gen)
        reports.append(rep)
    return params, reports


def local_train_hyperfedzero(client, globals_: ParamBundle, cfg: FLConfig, dataset: Dataset, round_idx: int = 0,
                             model=None):
    model = model or build_model(cfg.replace(method="hyperfedzero"), dataset.feature_dim, dataset.num_classes)
    return local_train(model, globals_, dataset, client, cfg, round_idx)


def local_train_fedavg(client, global_theta: ParamBundle, cfg: FLConfig, dataset: Dataset, round_idx: int = 0,
                       model=None):
    model = model or build_model(cfg.replace(method="fedavg"), dataset.feature_dim, dataset.num_classes)
    return local_train(model, global_theta, dataset, client, cfg, round_idx)


def fedavg_ft_adapt(model, global_params: ParamBundle, client: ClientDataset, cfg: FLConfig,
                    dataset: Dataset) -> ParamBundle:
    """K extra local SGD iterations on the client's train split (FedAvg-FT only)."""
    if not isinstance(model, ClassifierModel):
        raise ad.ContractError("fine-tuning is reserved for the FedAvg-FT baseline")
    PASSES.add(finetune_calls=1)
    adapted, _ = local_train(model, global_params, dataset, client, cfg, cfg.rounds, purpose="finetune/")
    return adapted


# the round loop

def _freeze(bundle: ParamBundle) -> ParamBundle:
    for p in bundle.values():
        p.freeze()
    return bundle


def _frozen_arrays(state: GlobalState) -> list[np.ndarray]:
    bundles = state.client_params if state.client_params is not None else [state.params]
    return [p.values for b in bundles for p in b.values()]


def make_predictors(model, state: GlobalState, cfg: FLConfig, dataset: Dataset):
    """Return ``(global_predictors, predict_for)`` for the evaluation routines.

    ``global_predictors`` is a list of predictors whose accuracies are averaged for
    gACC/zACC (a single one except for the Local baseline).
    """
    def predictor(bundle):
        return lambda x: model.logits(bundle, x)

    if state.method == "local":
        preds = [predictor(b) for b in state.client_params]
        return preds, lambda c: preds[c.client_id]
    glob = predictor(state.params)
    if state.method == "fedavg_ft":
        def predict_for(c):
            return predictor(fedavg_ft_adapt(model, state.params, c, cfg, dataset)) if c.participating else glob
        return [glob], predict_for
    return [glob], lambda c: glob


def evaluate_state(model, state: GlobalState, cfg: FLConfig, dataset: Dataset, holdout,
                   participating: list[ClientDataset], nonparticipating: list[ClientDataset]) -> dict:
    preds, predict_for = make_predictors(model, state, cfg, dataset)
    out = {}
    out["gacc"] = (float(np.mean([evaluate_gacc(p, dataset, holdout) for p in preds]))
                   if holdout is not None and len(holdout) else float("nan"))
    out["pacc"], out["pacc_per_client"] = evaluate_pacc(predict_for, dataset, participating)
    if nonparticipating:
        per = []
        for p in preds:
            _, accs = evaluate_zacc(lambda c, p=p: p, dataset, nonparticipating, _frozen_arrays(state))
            per.append(accs)
        out["zacc_per_client"] = list(np.mean(per, axis=0))
        out["zacc"] = float(np.mean(out["zacc_per_client"]))
    else:
        out["zacc"], out["zacc_per_client"] = float("nan"), []
    return out


def run_training(cfg: FLConfig, partition: Partition, dataset: Dataset, holdout=None,
                 state: GlobalState | None = None, checkpoint_path=None) -> tuple[GlobalState, MetricsReport]:
    """Train for ``cfg.rounds`` rounds and evaluate every ``cfg.eval_interval`` rounds and at the end.

    Passing a ``state`` from a checkpoint resumes after its last completed round.
    """
    if partition.n_participating != cfg.num_participating:
        raise ValueError(f"partition has {partition.n_participating} participating clients, "
                         f"config expects {cfg.num_participating}")
    model = build_model(cfg, dataset.feature_dim, dataset.num_classes)
    participating, nonparticipating = build_clients(partition, cfg.test_fraction, cfg.seed)
    sizes = [c.size for c in participating]
    local = cfg.method == "local"

    if state is None:
        init = model.init(RngStream(cfg.seed, purpose="init"))
        state = GlobalState(0, _freeze(init), cfg.method,
                            [_freeze(bundle_copy(init)) for _ in participating] if local else None)
    check_bundle(model, state.params)
    passes_log = []

    def train_client(i: int):
        c = participating[i]
        start = state.client_params[i] if local else state.params
        try:
            return local_train(model, start, dataset, c, cfg, state.round)
        except NonFiniteError as exc:
            raise NumericFailure(f"non-finite value in round {state.round}, client {c.client_id}: {exc}") from exc

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        while state.round < cfg.rounds:
            before = PASSES.snapshot()
            if pool is None:
                results = [train_client(i) for i in range(len(participating))]
            else:
                results = list(pool.map(train_client, range(len(participating))))
            if local:
                state.client_params = [_freeze(b) for b, _ in results]
                state.params = state.client_params[0]
            else:
                state.params = _freeze(aggregate([b for b, _ in results], sizes))
            after = PASSES.snapshot()
            passes_log.append({k: after[k] - before[k] for k in after})
            state.round += 1
            reps = [r for _, rs in results for r in rs]
            row = {"round": state.round,
                   "loss": float(np.mean([r.loss for r in reps])),
                   "ce": float(np.mean([r.ce for r in reps])),
                   "penalty": float(np.mean([r.penalty for r in reps]))}
            if state.round % cfg.eval_interval == 0 or state.round == cfg.rounds:
                ev = evaluate_state(model, state, cfg, dataset, holdout, participating, nonparticipating)
                row.update(gacc=ev["gacc"], pacc=ev["pacc"], zacc=ev["zacc"])
            state.history.append(row)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, state, cfg)
    finally:
        if pool is not None:
            pool.shutdown()

    ev = evaluate_state(model, state, cfg, dataset, holdout, participating, nonparticipating)
    collapse = None
    if model.uses_embeddings and len(participating) >= 2:
        collapse = embedding_collapse(lambda x: model.embed(state.params, x), dataset, participating)
    report = MetricsReport(ev["gacc"], ev["pacc"], ev["zacc"], ev["pacc_per_client"], ev["zacc_per_client"],
                           list(state.history), cfg.fingerprint(), collapse, passes_log)
    return state, report


# checkpoints

def save_checkpoint(path, state: GlobalState, cfg: FLConfig) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "round": state.round,
        "method": state.method,
        "config": cfg.to_dict(),
        "params": {k: v.to_dict() for k, v in state.params.items()},
        "client_params": (None if state.client_params is None else
                          [{k: v.to_dict() for k, v in b.items()} for b in state.client_params]),
        "history": state.history,
    }
    atomic_write_text(path, json.dumps(doc))


def load_checkpoint(path) -> tuple[GlobalState, FLConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    cfg = from_mapping(doc["config"])
    params = _freeze({k: FlatParams.from_dict(v) for k, v in doc["params"].items()})
    clients = doc.get("client_params")
    if clients is not None:
        clients = [_freeze({k: FlatParams.from_dict(v) for k, v in b.items()}) for b in clients]
    return GlobalState(int(doc["round"]), params, doc["method"], clients, list(doc.get("history", []))), cfg


__all__ = ["aggregate", "aggregation_weights", "local_train", "local_train_hyperfedzero", "local_train_fedavg",
           "fedavg_ft_adapt", "run_training", "sgd_step", "GlobalState", "TrainStepReport", "PASSES",
           "save_checkpoint", "load_checkpoint", "NumericFailure", "AggregationError", "HISTORY_FIELDS"]
