from __future__ import annotations

import numpy as np

from petlsv.numcore.params import ParamGroup
from petlsv.numcore.rng import make_rng
from petlsv.numcore.tensor import Tensor, gradients


def _tensors(params):
    return [p.tensor if isinstance(p, ParamGroup) else p for p in params]


def promote(params, dtype=np.float64):
    """Cast parameter storage in place (64-bit shadow mode for checking)."""
    for t in _tensors(params):
        t.data = t.data.astype(dtype)


def grad_check(f, params, eps: float = 1e-4, n_samples: int = 12, seed: int = 0, analytic=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    ``params``.  Parameters are promoted to float64 for the duration of the
    check and restored afterwards.  ``analytic`` overrides the tape gradients
    (used to test the checker itself).
    """
    tensors = _tensors(params)
    saved = [(t.data, t.requires_grad) for t in tensors]
    try:
        for t in tensors:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
        if analytic is None:
            analytic = gradients(f(), tensors)
        rng = make_rng(seed, "grad_check")
        worst = 0.0
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if n <= n_samples else rng.choice(n, size=n_samples, replace=False)
            ga = np.asarray(ga).reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                err = abs(ga[i] - fd) / max(1.0, abs(ga[i]))
                worst = max(worst, err)
        return worst
    finally:
        for t, (data, req) in zip(tensors, saved):
            t.data = data
            t.requires_grad = req


def check_tensor_finite(t: Tensor) -> bool:
    return bool(np.isfinite(t.data).all())
