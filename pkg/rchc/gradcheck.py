# rchc/gradcheck.py

"""Central finite-difference checks for the autodiff primitives and losses."""

import numpy as np

from .autodiff import Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-3


def numerical_gradient(fn, target, step=DEFAULT_STEP):
    """Central differences of scalar `fn()` w.r.t. `target.data`, perturbed in place."""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = _scalar(fn())
        flat[i] = original - step
        minus = _scalar(fn())
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return diff / scale


def check_gradients(fn, tensors, step=DEFAULT_STEP):
    """Return the relative error per tensor between backward() and finite differences.

    `fn` must rebuild the graph from `tensors` on every call.
    """
    loss = fn()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    return [relative_error(a, numerical_gradient(fn, t, step)) for a, t in zip(analytic, tensors)]


def _scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)
