"""Local attention units: spatial gating after the token mixer, channel gating
after the channel mixer."""

from __future__ import annotations

import numpy as np

from . import engine as eg
from .engine import Module, Tensor
from .layers import Linear


class SpatialAttnParams(Module):
    """k x k convolution from [channel-mean; channel-max] maps to one gate map."""

    def __init__(self, rng: np.random.Generator, k: int = 7, dtype=np.float32):
        if k % 2 == 0:
            raise eg.EngineError("spatial attention kernel size must be odd")
        scale = 1.0 / np.sqrt(2 * k * k)
        self.kernel = eg.parameter(rng.uniform(-scale, scale, size=(1, 2, k, k)), dtype=dtype)
        self.bias = eg.parameter(np.zeros(1), dtype=dtype)
        self.k = k


class ChannelAttnParams(Module):
    """Squeeze (C -> C/r) and expand (C/r -> C) linears around a GELU."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 4, dtype=np.float32):
        if channels % reduction:
            raise eg.EngineError(f"reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        self.reduce = Linear(rng, channels, hidden, dtype)
        self.expand = Linear(rng, hidden, channels, dtype)


def spatial_attention(x: Tensor, p: SpatialAttnParams) -> Tensor:
    """x * sigmoid(conv([mean_c(x); max_c(x)])), gate broadcast over channels."""
    mean_map = eg.mean(x, axis=0, keepdims=True)
    max_map = eg.max_(x, axis=0, keepdims=True)
    stat = eg.concat([mean_map, max_map], axis=0)
    gate = eg.sigmoid(eg.conv2d(stat, p.kernel, p.bias, stride=1, padding=p.k // 2))
    return eg.mul(x, gate)


def channel_attention(x: Tensor, p: ChannelAttnParams) -> Tensor:
    """x * sigmoid(expand(gelu(reduce(global-avg-pool(x))))), per-channel gate."""
    pooled = eg.mean(x, axis=(1, 2))  # (C,)
    gate = eg.sigmoid(p.expand(eg.gelu(p.reduce(pooled))))
    return eg.mul(x, eg.reshape(gate, (-1, 1, 1)))
