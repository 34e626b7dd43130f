import numpy as np
import pytest

from hyperfedzero import autodiff as ad
from hyperfedzero.autodiff import ContractError, Tensor
from hyperfedzero.config import FLConfig
from hyperfedzero.datasets import ClientDataset, Dataset, Partition, build_clients, dirichlet_partition, synth_shifted
from hyperfedzero.federation import (PASSES, AggregationError, NumericFailure, aggregate, aggregation_weights,
                                     fedavg_ft_adapt, load_checkpoint, local_train, local_train_fedavg,
                                     local_train_hyperfedzero, run_training, save_checkpoint)
from hyperfedzero.models import build_model
from hyperfedzero.params import FlatParams
from hyperfedzero.rng import RngStream

SMALL = dict(classifier_hidden=[5], extractor_hidden=[4], embed_dim=3, chunk_size=16, chunk_dim=2,
             hypernet_hidden=[6], hypernet_final_scale=1.0, hypernet_chunk_std=1.0, feature_dim=2,
             num_classes=3, eval_interval=1, lr=0.1, num_participating=1, num_nonparticipating=1)


def small_cfg(**kw):
    return FLConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def data():
    ds = synth_shifted(3, 40, 2, 3.0, seed=0)
    return ds


def _partition(ds, n, m, seed=0):
    return dirichlet_partition(ds, n, m, 1.0, min_per_client=5, seed=seed)


def _bundle(**groups):
    return {k: FlatParams(k, np.asarray(v, dtype=np.float64), ((k, (len(v),)),)) for k, v in groups.items()}


# aggregation

class TestAggregate:
    def test_single_client_identity(self):
        b = _bundle(w=[1.0, -2.0, 3.5])
        np.testing.assert_array_equal(aggregate([b], [7])["w"].values, b["w"].values)

    def test_symmetric_cancels(self):
        v = np.array([1.0, -2.0, 0.25])
        out = aggregate([_bundle(w=v), _bundle(w=-v)], [5, 5])
        assert not out["w"].values.any()

    def test_weighted_arithmetic(self):
        assert aggregate([_bundle(w=[0.0]), _bundle(w=[4.0])], [1, 3])["w"].values[0] == 3.0

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = aggregation_weights(rng.integers(1, 10**6, size=rng.integers(1, 30)))
            assert abs(w.sum() - 1.0) <= 1e-12 and np.all(w > 0)

    def test_linear(self):
        rng = np.random.default_rng(1)
        xs = [rng.normal(size=4) for _ in range(3)]
        sizes = [2, 5, 11]
        base = aggregate([_bundle(w=x) for x in xs], sizes)["w"].values
        scaled = aggregate([_bundle(w=2.5 * x) for x in xs], sizes)["w"].values
        np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-15, atol=1e-15)

    def test_groups_independent(self):
        out = aggregate([_bundle(a=[1.0], b=[10.0]), _bundle(a=[3.0], b=[30.0])], [1, 1])
        assert out["a"].values[0] == 2.0 and out["b"].values[0] == 20.0

    def test_errors(self):
        with pytest.raises(AggregationError):
            aggregate([_bundle(w=[1.0]), _bundle(w=[1.0, 2.0])], [1, 1])
        with pytest.raises(AggregationError):
            aggregate([], [])
        with pytest.raises(AggregationError):
            aggregate([_bundle(w=[1.0])], [0])


# local training

def _numpy_mlp_step(x, y, vec, widths, lr):
    """Hand-derived backprop for a one-hidden-layer ReLU MLP with mean cross-entropy."""
    d, h, c = widths
    w1 = vec[:d * h].reshape(d, h)
    b1 = vec[d * h:d * h + h]
    o = d * h + h
    w2 = vec[o:o + h * c].reshape(h, c)
    b2 = vec[o + h * c:]
    pre = x @ w1 + b1
    act = np.maximum(pre, 0)
    z = act @ w2 + b2
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dz = (p - np.eye(c)[y]) / len(y)
    gw2, gb2 = act.T @ dz, dz.sum(0)
    dpre = (dz @ w2.T) * (pre > 0)
    gw1, gb1 = x.T @ dpre, dpre.sum(0)
    return vec - lr * np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def _single_client(ds, cfg):
    part = Partition([np.arange(len(ds) - 20), np.arange(len(ds) - 20, len(ds))], 1, 1.0, cfg.seed, 1)
    return part, build_clients(part, cfg.test_fraction, cfg.seed)[0][0]


class TestLocalTraining:
    def test_zero_lr_unchanged(self, data):
        for method in ("fedavg", "hyperfedzero", "opt1"):
            cfg = small_cfg(method=method, lr=0.0, local_iters=3)
            model = build_model(cfg, 2, 3)
            g = model.init(RngStream(0))
            _, client = _single_client(data, cfg)
            out, _ = local_train(model, g, data, client, cfg, 0)
            for k in g:
                np.testing.assert_array_equal(out[k].values, g[k].values)

    def test_globals_not_mutated(self, data):
        cfg = small_cfg(method="hyperfedzero", local_iters=2)
        model = build_model(cfg, 2, 3)
        g = model.init(RngStream(0))
        snap = {k: v.values.copy() for k, v in g.items()}
        _, client = _single_client(data, cfg)
        local_train_hyperfedzero(client, g, cfg, data, model=model)
        for k in g:
            np.testing.assert_array_equal(g[k].values, snap[k])

    def test_fedavg_matches_numpy_backprop(self, data):
        cfg = small_cfg(method="fedavg", local_iters=1, batch_size=10**6, rounds=1, num_nonparticipating=0)
        part, client = _single_client(data, cfg)
        state, _ = run_training(cfg, part, data)
        model = build_model(cfg, 2, 3)
        init = model.init(RngStream(cfg.seed, purpose="init"))["classifier"].values
        x, y = data.features[client.train], data.labels[client.train]
        expected = _numpy_mlp_step(x, y, init, (2, 5, 3), cfg.lr)
        np.testing.assert_allclose(state.params["classifier"].values, expected, rtol=0, atol=1e-12)

    def test_hyperfedzero_matches_standalone_step(self, data):
        cfg = small_cfg(method="hyperfedzero", local_iters=1, batch_size=10**6, rounds=1, num_nonparticipating=0)
        part, client = _single_client(data, cfg)
        state, _ = run_training(cfg, part, data)
        model = build_model(cfg, 2, 3)
        init = model.init(RngStream(cfg.seed, purpose="init"))
        leaves = {k: Tensor(v.values, requires_grad=True) for k, v in init.items()}
        noise = RngStream(cfg.seed, client.client_id, 0, "noise").generator()
        parts = model.loss(leaves, data.features[client.train], data.labels[client.train], noise)
        ad.backward(parts.loss)
        for k in init:
            expected = init[k].values - cfg.lr * leaves[k].grad
            np.testing.assert_allclose(state.params[k].values, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("method", ["fedavg", "hyperfedzero"])
    def test_descends(self, data, method):
        cfg = small_cfg(method=method, local_iters=20, lr=0.1)
        model = build_model(cfg, 2, 3)
        _, client = _single_client(synth_shifted(3, 40, 2, 5.0, seed=2), cfg)
        ds = synth_shifted(3, 40, 2, 5.0, seed=2)
        _, reps = local_train(model, model.init(RngStream(0)), ds, client, cfg, 0)
        assert reps[-1].loss < reps[0].loss
        for r in reps:
            assert abs(r.loss - (r.ce + r.penalty)) <= 1e-12

    def test_identical_data_fedavg_is_centralized(self):
        base = synth_shifted(3, 10, 2, 3.0, seed=4)
        copies = 3
        ds = Dataset(np.tile(base.features, (copies, 1)), np.tile(base.labels, copies), 3)
        n = len(base)
        cfg = small_cfg(method="fedavg", local_iters=1, batch_size=10**6)
        model = build_model(cfg, 2, 3)
        g = model.init(RngStream(0))
        clients = [ClientDataset(i, np.arange(i * n, (i + 1) * n), np.array([], dtype=np.int64))
                   for i in range(copies)]
        outs = [local_train_fedavg(c, g, cfg, ds, model=model)[0] for c in clients]
        agg = aggregate(outs, [n] * copies)["classifier"].values
        expected = _numpy_mlp_step(base.features, base.labels, g["classifier"].values, (2, 5, 3), cfg.lr)
        np.testing.assert_allclose(agg, expected, rtol=0, atol=1e-12)

    def test_empty_client(self, data):
        cfg = small_cfg(method="fedavg")
        model = build_model(cfg, 2, 3)
        with pytest.raises(ContractError):
            local_train(model, model.init(RngStream(0)), data, ClientDataset(0, [], []), cfg, 0)


# fine-tuning

class TestFineTune:
    def test_zero_lr_returns_global(self, data):
        cfg = small_cfg(method="fedavg_ft", lr=0.0)
        model = build_model(cfg, 2, 3)
        g = model.init(RngStream(0))
        _, client = _single_client(data, cfg)
        out = fedavg_ft_adapt(model, g, client, cfg, data)
        np.testing.assert_array_equal(out["classifier"].values, g["classifier"].values)

    def test_lowers_train_loss(self, data):
        cfg = small_cfg(method="fedavg_ft", local_iters=10, batch_size=10**6)
        model = build_model(cfg, 2, 3)
        g = model.init(RngStream(0))
        _, client = _single_client(data, cfg)
        x, y = data.features[client.train], data.labels[client.train]

        def loss(bundle):
            return ad.cross_entropy(Tensor(model.logits(bundle, x)), y).item()

        assert loss(fedavg_ft_adapt(model, g, client, cfg, data)) < loss(g)

    def test_refused_for_hyperfedzero(self, data):
        cfg = small_cfg(method="hyperfedzero")
        model = build_model(cfg, 2, 3)
        _, client = _single_client(data, cfg)
        with pytest.raises(ContractError):
            fedavg_ft_adapt(model, model.init(RngStream(0)), client, cfg, data)


# round loop

class TestRunTraining:
    def test_local_isolation(self, data):
        cfg = small_cfg(method="local", num_participating=3, num_nonparticipating=1, rounds=2)
        part = _partition(data, 3, 1)
        s1, _ = run_training(cfg, part, data)
        other = data.features.copy()
        other[part.client_indices[1]] += 5.0
        s2, _ = run_training(cfg, part, Dataset(other, data.labels, 3))
        np.testing.assert_array_equal(s1.client_params[0]["classifier"].values,
                                      s2.client_params[0]["classifier"].values)
        assert not np.array_equal(s1.client_params[1]["classifier"].values,
                                  s2.client_params[1]["classifier"].values)

    @pytest.mark.parametrize("method", ["fedavg", "hyperfedzero", "opt1", "fedavg_ft", "local"])
    def test_deterministic(self, data, method):
        cfg = small_cfg(method=method, num_participating=3, num_nonparticipating=1, rounds=2)
        part = _partition(data, 3, 1)
        _, a = run_training(cfg, part, data, holdout=np.arange(10))
        _, b = run_training(cfg, part, data, holdout=np.arange(10))
        assert a.history_csv() == b.history_csv()
        assert a.to_dict() == b.to_dict()

    @pytest.mark.parametrize("method", ["fedavg", "hyperfedzero"])
    def test_parallel_equals_serial(self, data, method):
        part = _partition(data, 4, 1)
        serial, _ = run_training(small_cfg(method=method, num_participating=4, rounds=2), part, data)
        par, _ = run_training(small_cfg(method=method, num_participating=4, rounds=2, workers=4), part, data)
        for k in serial.params:
            assert serial.params[k].values.tobytes() == par.params[k].values.tobytes()

    def test_pass_counts_equal_work(self, data):
        part = _partition(data, 3, 1)
        counts = {}
        for method in ("fedavg", "hyperfedzero"):
            cfg = small_cfg(method=method, num_participating=3, rounds=2, local_iters=4)
            _, rep = run_training(cfg, part, data)
            counts[method] = rep.passes_per_round
            for row in rep.passes_per_round:
                assert row["train_forward"] == row["train_backward"] == 3 * 4
        assert counts["fedavg"] == counts["hyperfedzero"]

    def test_hyperfedzero_never_finetunes(self, data):
        before = PASSES.snapshot()["finetune_calls"]
        run_training(small_cfg(method="hyperfedzero", num_participating=3, rounds=1), _partition(data, 3, 1), data)
        assert PASSES.snapshot()["finetune_calls"] == before
        run_training(small_cfg(method="fedavg_ft", num_participating=3, rounds=1), _partition(data, 3, 1), data)
        assert PASSES.snapshot()["finetune_calls"] > before

    def test_nan_names_round_and_client(self, data):
        cfg = small_cfg(method="fedavg", num_participating=3, rounds=3, lr=1e300)
        with pytest.raises(NumericFailure, match=r"round \d+, client \d+"):
            run_training(cfg, _partition(data, 3, 1), data)

    def test_partition_mismatch(self, data):
        with pytest.raises(ValueError):
            run_training(small_cfg(num_participating=2), _partition(data, 3, 1), data)

    def test_checkpoint_resume(self, data, tmp_path):
        part = _partition(data, 3, 1)
        full, _ = run_training(small_cfg(method="hyperfedzero", num_participating=3, rounds=2), part, data, holdout=np.arange(10))
        first, _ = run_training(small_cfg(method="hyperfedzero", num_participating=3, rounds=1), part, data,
                                holdout=np.arange(10), checkpoint_path=tmp_path / "ck.json")
        state, cfg = load_checkpoint(tmp_path / "ck.json")
        assert state.round == 1 and cfg.rounds == 1
        for k in first.params:
            assert state.params[k].values.tobytes() == first.params[k].values.tobytes()
        resumed, _ = run_training(cfg.replace(rounds=2), part, data, holdout=np.arange(10), state=state)
        for k in full.params:
            assert resumed.params[k].values.tobytes() == full.params[k].values.tobytes()
        assert resumed.history == full.history

    def test_checkpoint_local_round_trip(self, data, tmp_path):
        cfg = small_cfg(method="local", num_participating=3, rounds=1)
        state, _ = run_training(cfg, _partition(data, 3, 1), data)
        save_checkpoint(tmp_path / "ck.json", state, cfg)
        back, cfg2 = load_checkpoint(tmp_path / "ck.json")
        assert cfg2 == cfg and len(back.client_params) == 3
        for a, b in zip(state.client_params, back.client_params):
            np.testing.assert_array_equal(a["classifier"].values, b["classifier"].values)
