"""Shared test helpers: finite-difference gradient oracle."""

import numpy as np

from arnn.tensor import backward


def finite_difference(loss_fn, param, h=1e-5):
    """Central-difference gradient of loss_fn() w.r.t. every entry of param.value."""
    grad = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def assert_param_grads_match(loss_fn, params, rel=1e-4, abs_floor=1e-8, h=1e-5):
    """Backward gradients of loss_fn() match central differences for each param.

    Accepts an entry when |analytic - fd| <= abs_floor or the relative error
    against max(|analytic|, |fd|) is within rel.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    for p in params:
        analytic = p.grad.copy()
        fd = finite_difference(loss_fn, p, h=h)
        diff = np.abs(analytic - fd)
        scale = np.maximum(np.abs(analytic), np.abs(fd))
        bad = (diff > abs_floor) & (diff > rel * scale)
        assert not bad.any(), (
            f"gradient mismatch for {p.name or 'param'}: "
            f"max abs diff {diff.max():.3e}, worst rel "
            f"{(diff / np.maximum(scale, 1e-300)).max():.3e}"
        )
