"""Shared test utilities: finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from stagflow import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


def gradcheck(build_loss, params: dict[str, T.Tensor], tol: float = 1e-5,
              h: float = 1e-6) -> float:
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` must read the current ``params`` values and return a
    scalar Tensor when called under a tape (and a plain evaluation works
    tape-free too).  Returns the worst relative error over all parameters.
    """
    tape = T.Tape()
    with tape:
        loss = build_loss()
    tape.watch(*params.values())
    grads = tape.gradients(loss)
    worst = 0.0
    for name, p in params.items():
        def f(arr, p=p):
            old = p.data
            p.data = arr
            try:
                out = build_loss()
            finally:
                p.data = old
            return out.item()
        num = numeric_grad(f, p.data.copy(), h=h)
        worst = max(worst, max_rel_err(grads[p], num))
    assert worst < tol, f"gradient mismatch {worst:.3e} >= {tol:.1e}"
    return worst
