import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hyperfedzero import autodiff as ad
from hyperfedzero.autodiff import Tensor
from hyperfedzero.rng import RngStream, gaussian

from helpers import check_op_grad


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(np.eye(2), [[1, 2], [3, 4]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = ad.matmul([[1, 0], [0, 0]], [[5], [7]])
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_against_triple_loop(self):
        gen = RngStream(7, purpose="test").generator()
        a, b = gen.standard_normal((3, 4)), gen.standard_normal((4, 2))
        np.testing.assert_allclose(ad.matmul(a, b).data, triple_loop_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_gradient(self):
        gen = np.random.default_rng(0)
        check_op_grad(lambda a, b: (a @ b).sum() * 0.5 + ((a @ b) * (a @ b)).mean(),
                      gen.standard_normal((3, 1, 4)), gen.standard_normal((3, 4, 2)))
        check_op_grad(lambda a, b: ((a @ b) * (a @ b)).sum(),
                      gen.standard_normal((2, 5, 3)), gen.standard_normal((3, 2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(np.zeros(4)).data, [0.25] * 4)

    @pytest.mark.parametrize("c", [-1e3, -3.0, 0.0, 17.5, 1e3])
    def test_shift_invariance(self, c):
        np.testing.assert_allclose(ad.softmax([c, c]).data, [0.5, 0.5])

    def test_ln2(self):
        np.testing.assert_allclose(ad.softmax([math.log(2), 0.0]).data, [2 / 3, 1 / 3], atol=1e-15)

    def test_empty_axis(self):
        with pytest.raises(ad.ShapeError):
            ad.softmax(np.zeros((3, 0)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_on_simplex(self, v):
        out = ad.softmax(v).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)

    def test_gradient(self):
        gen = np.random.default_rng(1)
        w = gen.standard_normal((3, 4))
        check_op_grad(lambda v: (ad.softmax(v) * Tensor(w)).sum(), gen.standard_normal((3, 4)))
        check_op_grad(lambda v: (ad.log_softmax(v) * Tensor(w)).sum(), gen.standard_normal((3, 4)))


class TestSoftplus:
    def test_zero(self):
        assert ad.softplus(0.0).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_large(self):
        assert abs(ad.softplus(1000.0).item() - 1000.0) < 1e-12

    def test_very_negative(self):
        assert abs(ad.softplus(-1000.0).item()) < 1e-12

    def test_gradient(self):
        check_op_grad(lambda v: (ad.softplus(v) * ad.softplus(v)).sum(), np.linspace(-6, 6, 9))


class TestCrossEntropy:
    def test_uniform_logits(self):
        for label in range(10):
            loss = ad.cross_entropy(np.zeros((1, 10)), [label]).item()
            assert loss == pytest.approx(math.log(10), abs=1e-12)

    def test_monotone_in_margin(self):
        losses = [ad.cross_entropy([[m, 0.0, 0.0]], [0]).item() for m in np.linspace(0, 10, 21)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_scalar_reference(self):
        logits = [[0.3, -1.2, 2.0], [1.5, 0.1, -0.4]]
        labels = [2, 0]
        ref = 0.0
        for row, y in zip(logits, labels):
            ref += -(row[y] - math.log(sum(math.exp(v) for v in row)))
        ref /= 2
        assert abs(ad.cross_entropy(logits, labels).item() - ref) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(np.zeros((2, 3)), [0, 3])

    def test_gradient(self):
        gen = np.random.default_rng(2)
        check_op_grad(lambda z: ad.cross_entropy(z, [1, 0, 3]), gen.standard_normal((3, 4)))


class TestBackward:
    def test_square(self):
        p = Tensor(3.0, requires_grad=True)
        ad.backward(p * p)
        assert p.grad == pytest.approx(6.0)

    def test_non_scalar_root(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ContractError):
            ad.backward(p * p)

    def test_shared_subexpression_counted_once_per_use(self):
        p = Tensor(2.0, requires_grad=True)
        q = p * p
        ad.backward(q * q + q)  # p^4 + p^2 -> 4p^3 + 2p
        assert p.grad == pytest.approx(36.0)

    def test_fresh_tapes_identical(self):
        gen = np.random.default_rng(3)
        a, b = gen.standard_normal((4, 3)), gen.standard_normal((3, 2))

        def run():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            ad.backward(ad.cross_entropy(ta @ tb, [0, 1, 1, 0]))
            return ta.grad, tb.grad

        (g1, h1), (g2, h2) = run(), run()
        assert np.array_equal(g1, g2) and np.array_equal(h1, h2)

    def test_adjoints_reset_between_calls(self):
        p = Tensor(1.5, requires_grad=True)
        ad.backward(p * p)
        ad.backward(p * p)
        assert p.grad == pytest.approx(3.0)

    def test_composed_graph_matches_finite_differences(self):
        gen = np.random.default_rng(4)

        def build(x, w1, w2, b):
            h = ad.tanh(x @ w1 + b)
            z = ad.concat([h, ad.relu(x @ w2)], axis=1)
            e = ad.softmax(z)
            return ad.cross_entropy(ad.log(e + 1.0) * 3.0, [0, 2, 1]) + ad.xlogx(e).sum() / ad.exp(b).sum()

        check_op_grad(build, gen.standard_normal((3, 2)), gen.standard_normal((2, 3)),
                      gen.standard_normal((2, 2)), gen.standard_normal(3))

    @pytest.mark.parametrize("build", [
        lambda a: (a / (a * a + 1.0)).sum(),
        lambda a: (ad.broadcast_to(a[0:1], (3, 2)) * a).sum(),
        lambda a: a[np.array([0, 0, 2]), np.array([1, 1, 0])].sum() * 2.0,
        lambda a: a.reshape(6).mean() - (1.0 - a).sum(axis=0).sum(),
        lambda a: (-a * ad.exp(a)).mean(axis=1).sum(),
    ])
    def test_elementwise_and_shape_ops(self, build):
        check_op_grad(build, np.random.default_rng(5).standard_normal((3, 2)))


class TestNonFinite:
    def test_log_zero_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(np.array([0.0]))

    def test_overflow_raises(self):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(np.array([1e4]))

    def test_nan_leaf_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            Tensor([1.0, float("nan")])


class TestGaussian:
    def test_same_label_same_draws(self):
        r = RngStream(11, client=3, round=5, purpose="noise")
        assert np.array_equal(gaussian(r, (4, 5)).data, gaussian(RngStream(11, 3, 5, "noise"), (4, 5)).data)

    def test_moments(self):
        z = gaussian(RngStream(0, purpose="lln"), 100_000).data
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1.0) < 0.05

    @pytest.mark.parametrize("other", [
        RngStream(11, 4, 5, "noise"), RngStream(11, 3, 6, "noise"),
        RngStream(11, 3, 5, "batch"), RngStream(12, 3, 5, "noise"),
    ])
    def test_distinct_labels_differ(self, other):
        base = gaussian(RngStream(11, 3, 5, "noise"), 16).data
        assert not np.array_equal(base, gaussian(other, 16).data)


def test_dump_csv_round_trip(tmp_path):
    x = np.random.default_rng(9).standard_normal((3, 4)) * 1e-7
    ad.dump_csv(Tensor(x), tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# shape=3x4"
    back = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    assert np.array_equal(back, x)
