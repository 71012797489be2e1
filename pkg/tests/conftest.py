import numpy as np
import pytest

from gradlab.tensor import backward, zero_grads


def central_diff(make_loss, leaves, h=1e-5):
    """Per-coordinate central finite differences of a scalar-valued closure."""
    grads = []
    for t in leaves:
        flat = t.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = make_loss()
            flat[i] = old - h
            fm = make_loss()
            flat[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(make_loss_tensor, leaves, h=1e-5, tol=1e-4):
    """backward() against central differences; returns the worst relative error."""
    zero_grads(leaves)
    loss = make_loss_tensor()
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    numeric = central_diff(lambda: make_loss_tensor().item(), leaves, h=h)
    worst = max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: rel err {worst}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
