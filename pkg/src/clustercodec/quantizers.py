"""Quantizers: hard offset rounding, universal (noise) quantization for the
context-model path, and differentiable soft quantization for the decoder path."""

from __future__ import annotations

import numpy as np

from . import engine as eg
from .engine import Tensor


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (numpy's default rounds to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_offset(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """y_hat = round(y - mu) + mu; the coded symbol is round(y - mu)."""
    y = np.asarray(y)
    mu = np.asarray(mu)
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {mu.shape}")
    return round_half_away(y - mu) + mu


def offset_symbols(y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    return round_half_away(np.asarray(y) - np.asarray(mu)).astype(np.int64)


def universal_quantize(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Add uniform noise in (-0.5, 0.5) from a seeded generator (per element)."""
    noise = rng.uniform(-0.5, 0.5, size=y.data.shape).astype(y.data.dtype)
    return eg.add(y, eg.constant(noise))


def dsq(y: Tensor, k: float) -> Tensor:
    """Differentiable soft quantization: tanh-shaped rounding with hardness k.

    With r = y - floor(y) - 0.5:  floor(y) + 0.5 + tanh(k r) / (2 tanh(k/2)).
    Hard rounding in the limit k -> inf; gradient nonzero everywhere.
    """
    if k <= 0:
        raise ValueError("dsq hardness k must be positive")
    base = eg.constant(np.floor(y.data) + 0.5, dtype=y.data.dtype)
    r = eg.sub(y, base)
    scale = 1.0 / (2.0 * np.tanh(k / 2.0))
    return eg.add(base, eg.mul(eg.tanh(eg.mul(eg.constant(np.asarray(k, dtype=y.data.dtype)), r)),
                               eg.constant(np.asarray(scale, dtype=y.data.dtype))))
