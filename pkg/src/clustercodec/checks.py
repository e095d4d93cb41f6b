"""Finite-difference gradient verification, shared by tests and `selftest`."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import engine as eg
from .engine import Tape, Tensor


def finite_diff_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. every entry of arr."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    rel_tol: float = 1e-4, h: float = 1e-5) -> float:
    """Compare analytic gradients of loss_fn against central differences.

    Everything must already be float64. Returns the worst relative error and
    raises AssertionError when it exceeds rel_tol.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    eg.backward(tape, loss)
    worst = 0.0
    for p in params:
        assert p.data.dtype == np.float64, "gradient checks require float64 parameters"
        num = finite_diff_grad(lambda: float(loss_fn().data), p.data, h=h)
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        err = float(np.abs(ana - num).max() / denom)
        worst = max(worst, err)
        assert err < rel_tol, f"gradient mismatch {err:.3e} on param shape {p.data.shape}"
    return worst
