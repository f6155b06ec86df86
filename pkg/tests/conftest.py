"""Shared numerical oracles for the test suite."""

import numpy as np

from adhdeepnet.tensor import Tensor


def numeric_grad(build_scalar, array, h=1e-3):
    """Central finite differences of a scalar function w.r.t. one array.

    ``build_scalar`` is re-invoked after every perturbation and must read
    ``array`` afresh. Use float64 arrays so the h=1e-3 stencil resolves.
    """
    grad = np.zeros_like(array)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build_scalar()
        flat[i] = orig - h
        fm = build_scalar()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(forward, arrays, h=1e-3, tol=1e-4):
    """Compare autodiff gradients of ``forward`` against finite differences.

    ``forward`` maps a list of Tensors to a scalar Tensor. ``arrays`` are
    float64 numpy arrays; every one is treated as differentiable.
    """
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = forward(tensors)
    loss.backward()
    for t, a in zip(tensors, arrays):
        assert t.grad is not None, "missing gradient"
        num = numeric_grad(
            lambda: float(forward(
                [Tensor(x, dtype=np.float64) for x in arrays]).data),
            a, h=h)
        denom = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-8)
        rel = np.abs(t.grad - num).max() / denom
        assert rel < tol, f"gradient mismatch: rel error {rel:.3e}"


def probe_weights(shape, seed=0):
    """Fixed random projection so a scalar loss exercises every output."""
    return np.random.default_rng(seed).standard_normal(shape)
