"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn().item()
        flat[i] = orig - step
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``, with a 1e-10 floor on the denominator."""
    num = np.linalg.norm((analytic - numeric).ravel())
    den = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), 1e-10)
    return float(num / den)


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences.

    ``fn`` must rebuild its graph on every call and return a tensor; non-scalar
    outputs are contracted with a fixed random projection first.
    """
    out = fn()
    if out.size != 1:
        proj = np.random.default_rng(1234).standard_normal(out.shape)

        def scalar_fn():
            o = fn()
            return (o * Tensor(proj, dtype=o.dtype)).sum()

    else:
        scalar_fn = fn
    for t in inputs:
        t.grad = None
    backward(scalar_fn())
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numeric_grad(scalar_fn, t, step)))
    return worst
