import numpy as np
import pytest

from stfusion import tensor as T


def linear_probe(out, rng):
    """Random fixed linear functional of an op output, as a scalar loss.

    Keeps finite-difference checks well-conditioned (no degenerate losses).
    """
    c = T.Tensor(rng.normal(size=out.shape))
    return T.sum_all(T.mul(out, c))


def fd_gradient(make_loss, t, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. one tensor."""
    fd = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t.data[i]
        t.data[i] = old + h
        lp = make_loss().item()
        t.data[i] = old - h
        lm = make_loss().item()
        t.data[i] = old
        fd[i] = (lp - lm) / (2 * h)
    return fd


def max_rel_error(make_loss, tensors, h=1e-5):
    """Norm-relative error between analytic and finite-difference gradients."""
    loss = make_loss()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad.copy()
        fd = fd_gradient(make_loss, t, h)
        err = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-8)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
