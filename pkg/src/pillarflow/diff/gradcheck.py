"""Central finite-difference check of an operator's analytic backward pass."""
from __future__ import annotations

import numpy as np


def grad_check(op, inputs, eps=1e-6, wrt=None, max_elements=10_000, seed=0, **attrs) -> float:
    """Max relative error between analytic and numeric input gradients.

    The scalar probed is ``sum(op(inputs) * R)`` for a fixed random R. For each
    checked input the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``; the worst input is returned. Inputs above
    ``max_elements`` are checked on a random subset of entries.
    ``wrt`` selects input positions to check (default: all float arrays).
    """
    # keyed stream so the probe never coincides with user data drawn from default_rng(seed)
    rng = np.random.default_rng([seed, 0x5EED])
    inputs = [np.array(x, dtype=np.float64) if isinstance(x, np.ndarray) and x.dtype.kind == "f" else x
              for x in inputs]
    out, cache = op.forward(*inputs, **attrs)
    probe = rng.standard_normal(np.shape(out))
    analytic = op.backward(probe if np.ndim(out) else np.float64(probe), cache)
    if wrt is None:
        wrt = [i for i, x in enumerate(inputs) if isinstance(x, np.ndarray) and x.dtype.kind == "f"]
    worst = 0.0
    for i in wrt:
        x = inputs[i]
        if analytic[i] is None:
            continue
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        num = np.empty(idx.size)
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + eps
            fp = np.sum(op.forward(*inputs, **attrs)[0] * probe)
            flat[k] = orig - eps
            fm = np.sum(op.forward(*inputs, **attrs)[0] * probe)
            flat[k] = orig
            num[n] = (fp - fm) / (2 * eps)
        ana = np.asarray(analytic[i], dtype=np.float64).reshape(-1)[idx]
        scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-300)
        worst = max(worst, float(np.max(np.abs(ana - num)) / scale))
    return worst


def grad_check_fn(f, x, grad, eps=1e-6, max_elements=10_000, seed=0) -> float:
    """Same error measure for a scalar function ``f`` of one array with a known gradient."""
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if flat.size > max_elements:
        idx = rng.choice(flat.size, size=max_elements, replace=False)
    num = np.empty(idx.size)
    for n, k in enumerate(idx):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x)
        flat[k] = orig - eps
        fm = f(x)
        flat[k] = orig
        num[n] = (fp - fm) / (2 * eps)
    ana = np.asarray(grad, dtype=np.float64).reshape(-1)[idx]
    scale = max(np.max(np.abs(ana)), np.max(np.abs(num)), 1e-300)
    return float(np.max(np.abs(ana - num)) / scale)
