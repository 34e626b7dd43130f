import numpy as np

from hyperfedzero import autodiff as ad


def central_diff(f, arrays, eps=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = f(*arrays)
            a[i] = old - eps
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(n), np.abs(a))
        bad = np.abs(a - n) > rtol * scale + atol
        assert not bad.any(), f"max abs err {np.abs(a - n).max()} (rel tol {rtol})"


def check_op_grad(build, *arrays, rtol=1e-4):
    """``build`` maps Tensors to a scalar Tensor; compare tape gradients with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    analytic = ad.grad(build(*leaves), leaves)
    numeric = central_diff(lambda *xs: build(*[ad.Tensor(x) for x in xs]).item(), arrays)
    assert_grads_close(analytic, numeric, rtol)
