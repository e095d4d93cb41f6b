"""Guided post-quantization filtering in the latent domain.

A small convolutional network maps the dequantized latent to N candidate maps
per channel; the encoder solves a per-channel least-squares problem against
the true quantization error, signals the coefficients with 4-bit fixed-length
codes, and both sides apply the same weighted correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import Module, Tensor
from .layers import Conv2d
from .transform import ArchConfig

COEFF_RANGE = 2.0   # 4-bit quantizer covers [-2, 2]
COEFF_LEVELS = 16
_STEP = 2.0 * COEFF_RANGE / COEFF_LEVELS
RIDGE_REL = 1e-6    # default ridge: 1e-6 * trace(C^T C) / N


class CandidateNet(Module):
    """3x3 conv -> GELU -> 3x3 conv producing N candidates per latent channel.

    Output channel i*N + j is candidate j for channel i."""

    def __init__(self, rng: np.random.Generator, cfg: ArchConfig, dtype=np.float32):
        m, n = cfg.latent_channels, cfg.pqf_candidates
        self.conv1 = Conv2d(rng, m, cfg.pqf_hidden, 3, stride=1, padding=1, dtype=dtype)
        self.conv2 = Conv2d(rng, cfg.pqf_hidden, n * m, 3, stride=1, padding=1, dtype=dtype)
        self.n = n
        self.m = m

    def __call__(self, y_hat: Tensor) -> Tensor:
        return self.conv2(eg.gelu(self.conv1(y_hat)))


def gen_candidates(y_hat, net: CandidateNet) -> Tensor:
    """(M, h, w) dequantized latent -> (N*M, h, w) candidate maps."""
    t = y_hat if isinstance(y_hat, Tensor) else eg.constant(y_hat)
    return net(t)


def candidate_matrix(candidates: np.ndarray, channel: int, n: int) -> np.ndarray:
    """Stacked vectorized candidates for one channel: (P, N)."""
    maps = candidates[channel * n:(channel + 1) * n]
    return maps.reshape(n, -1).T


def default_ridge(c: np.ndarray) -> float:
    g = c.T @ c
    return RIDGE_REL * float(np.trace(g)) / c.shape[1]


@dataclass
class SolveResult:
    coeffs: np.ndarray
    ridge_fallback: bool


def solve_coefficients(c: np.ndarray, eps: np.ndarray, ridge: float | None = None) -> SolveResult:
    """Least-squares coefficients a = (C^T C + ridge I)^-1 C^T eps, float64.

    ridge=None uses the relative default; a singular system at ridge=0 falls
    back to the default ridge and is flagged.
    """
    c = np.asarray(c, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    if c.ndim != 2 or c.shape[0] != eps.size:
        raise ValueError(f"candidate matrix {c.shape} incompatible with error length {eps.size}")
    n = c.shape[1]
    if ridge is None:
        ridge = default_ridge(c)
    g = c.T @ c + ridge * np.eye(n)
    rhs = c.T @ eps
    try:
        a = np.linalg.solve(g, rhs)
        fallback = False
        if ridge == 0.0 and not np.isfinite(a).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        a = np.linalg.solve(c.T @ c + default_ridge(c) * np.eye(n) + 1e-12 * np.eye(n), rhs)
        fallback = True
    return SolveResult(a, fallback)


def pqf_loss(candidates: Tensor, eps: np.ndarray, ridge_rel: float = RIDGE_REL) -> Tensor:
    """Sum over channels of -eps^T C (C^T C + ridge I)^-1 C^T eps (N=2 closed form).

    Differentiable w.r.t. the candidate maps; the true error is a constant
    training target.
    """
    nm, h, w = candidates.data.shape
    m = eps.shape[0]
    n = nm // m
    if n != 2:
        raise ValueError("differentiable filtering loss supports N=2 only")
    p = h * w
    dtype = candidates.data.dtype
    flat = eg.reshape(candidates, (m, n, p))
    c1 = eg.reshape(eg.narrow(flat, 1, 0, 1), (m, p))
    c2 = eg.reshape(eg.narrow(flat, 1, 1, 1), (m, p))
    e = eg.constant(eps.reshape(m, p).astype(dtype))
    g11 = eg.sum_(eg.square(c1), axis=1)
    g22 = eg.sum_(eg.square(c2), axis=1)
    g12 = eg.sum_(eg.mul(c1, c2), axis=1)
    b1 = eg.sum_(eg.mul(c1, e), axis=1)
    b2 = eg.sum_(eg.mul(c2, e), axis=1)
    ridge = eg.mul(eg.add(g11, g22), eg.constant(ridge_rel / n, dtype=dtype))
    r11 = eg.add(g11, ridge)
    r22 = eg.add(g22, ridge)
    det = eg.add(eg.sub(eg.mul(r11, r22), eg.square(g12)), eg.constant(1e-24, dtype=dtype))
    a1 = eg.div(eg.sub(eg.mul(r22, b1), eg.mul(g12, b2)), det)
    a2 = eg.div(eg.sub(eg.mul(r11, b2), eg.mul(g12, b1)), det)
    return eg.neg(eg.sum_(eg.add(eg.mul(a1, b1), eg.mul(a2, b2))))


def quantize_coefficients(a: np.ndarray) -> np.ndarray:
    """Nearest of 16 uniform levels on [-2, 2], clamping, ties toward the
    lower code."""
    a = np.asarray(a, dtype=np.float64)
    codes = np.ceil((a + COEFF_RANGE) / _STEP - 1.0).astype(np.int64)
    return np.clip(codes, 0, COEFF_LEVELS - 1)


def dequantize_coefficients(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if (codes < 0).any() or (codes >= COEFF_LEVELS).any():
        raise ValueError("coefficient codes must be 4-bit values")
    return -COEFF_RANGE + (codes + 0.5) * _STEP


def clamp_count(a: np.ndarray) -> int:
    """How many raw coefficients fall outside the quantizer range."""
    top = -COEFF_RANGE + (COEFF_LEVELS - 0.5) * _STEP
    bot = -COEFF_RANGE + 0.5 * _STEP
    return int(((a > top) | (a < bot)).sum())


def apply_filter(y_hat: np.ndarray, candidates: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """y_tilde_i = y_hat_i + sum_j a_j^i * C_j^i, channel by channel."""
    m, h, w = y_hat.shape
    n = coeffs.shape[1]
    maps = candidates.reshape(m, n, h, w)
    return y_hat + np.einsum("mn,mnhw->mhw", coeffs, maps.astype(np.float64))


def solve_all_channels(candidates: np.ndarray, eps: np.ndarray, n: int,
                       ridge: float | None = None) -> tuple[np.ndarray, int]:
    """Per-channel solves in channel order; returns (M, N) coefficients and
    the number of ridge fallbacks."""
    m = eps.shape[0]
    coeffs = np.zeros((m, n))
    fallbacks = 0
    for i in range(m):
        res = solve_coefficients(candidate_matrix(candidates, i, n), eps[i].reshape(-1), ridge)
        coeffs[i] = res.coeffs
        fallbacks += res.ridge_fallback
    return coeffs, fallbacks
