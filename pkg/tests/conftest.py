import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(b)).max() + floor
    return np.abs(a - b).max() / denom


def check_grads(fn, tensors, eps=1e-5, tol=1e-4):
    """Compare analytic grads of scalar fn() against central differences."""
    from vssgrasp.tensor import finite_difference

    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward(retain_graph=True)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    numeric = finite_difference(fn, tensors, eps=eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.abs(n).max() + np.abs(a).max() + 1e-8
        worst = max(worst, float(np.abs(a - n).max() / scale))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
