"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from ..errors import UsageError


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def analytic_gradients(fn, inputs):
    for t in inputs:
        t.grad = None
    out = fn()
    if out.data.size != 1:
        raise UsageError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def grad_check(fn, inputs, eps=1e-5, tol=1e-4, max_checks=None, seed=0, analytic=None,
               return_details=False):
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` is a zero-argument closure returning a scalar :class:`Tensor`
    computed from ``inputs``. ``max_checks`` caps the number of coordinates
    probed per input (chosen at random with ``seed``); ``None`` probes all.
    ``analytic`` overrides the backward pass, which lets a caller feed a
    deliberately wrong gradient to test the harness itself.
    """
    if analytic is None:
        analytic = analytic_gradients(fn, inputs)
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    for t, grad in zip(inputs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # a view, so edits reach the tensor
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = rng.choice(flat.size, size=max_checks, replace=False)
        for k in coords:
            saved = flat[k]
            flat[k] = saved + eps
            f_plus = float(fn().data)
            flat[k] = saved - eps
            f_minus = float(fn().data)
            flat[k] = saved
            numeric = (f_plus - f_minus) / (2 * eps)
            err = float(relative_error(grad.reshape(-1)[k], numeric))
            details.append((t.name, int(k), float(grad.reshape(-1)[k]), numeric, err))
            worst = max(worst, err)
    if return_details:
        return worst, details
    return worst
