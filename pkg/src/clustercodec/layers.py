"""Parameterized building blocks on top of the array engine."""

from __future__ import annotations

import math

import numpy as np

from . import engine as eg
from .engine import Module, Tensor


def _rand_matrix(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> np.ndarray:
    scale = math.sqrt(1.0 / in_dim)
    return rng.uniform(-scale, scale, size=(out_dim, in_dim)).astype(dtype)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, dtype=np.float32, bias: bool = True):
        self.w = eg.parameter(_rand_matrix(rng, out_dim, in_dim, dtype), dtype=dtype)
        self.b = eg.parameter(np.zeros(out_dim), dtype=dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return eg.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = eg.parameter(np.ones(channels), dtype=dtype)
        self.bias = eg.parameter(np.zeros(channels), dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return eg.layer_norm(x, self.gain, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, k: int, stride: int = 1,
                 padding: int | None = None, dtype=np.float32, transposed: bool = False):
        fan = in_ch * k * k
        scale = math.sqrt(1.0 / fan)
        shape = (in_ch, out_ch, k, k) if transposed else (out_ch, in_ch, k, k)
        self.kernel = eg.parameter(rng.uniform(-scale, scale, size=shape), dtype=dtype)
        self.bias = eg.parameter(np.zeros(out_ch), dtype=dtype)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.transposed = transposed

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return eg.conv2d_transpose(x, self.kernel, self.bias, self.stride, self.padding)
        return eg.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class Mlp(Module):
    """Two linear layers around a GELU."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int, dtype=np.float32):
        self.fc1 = Linear(rng, in_dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, out_dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(eg.gelu(self.fc1(x)))
