"""Analysis/synthesis transforms and hyper networks.

The analysis path turns an RGB image into a latent grid through four stages of
(downsample + clustering blocks); synthesis mirrors it. A hyper encoder and
three hyper decoders (mean, scale, latent feature) provide side information.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .attention import ChannelAttnParams, SpatialAttnParams, channel_attention, spatial_attention
from .clustering import ClusterParams, cluster_mix
from .engine import EngineError, Module, Tensor
from .layers import Conv2d, LayerNorm, Linear, Mlp
from .rangecoder import SIGMA_MIN

HYPER_CHANNELS = 192  # fixed width of the hyper latent
PAD_MULTIPLE = 16


def default_group_sizes(latent_channels: int) -> tuple[int, ...]:
    """Uneven channel groups, smallest first; [16, 16, 32, 64, 64] at M=192."""
    fractions = (1, 1, 2, 4, 4)
    total = sum(fractions)
    sizes = [max(1, (latent_channels * f) // total) for f in fractions]
    sizes[-1] += latent_channels - sum(sizes)
    return tuple(sizes)


@dataclass(frozen=True)
class ArchConfig:
    stage_channels: tuple[int, ...] = (96, 144, 192, 192)
    stage_depths: tuple[int, ...] = (1, 2, 4, 2)
    latent_channels: int = 192
    hyper_channels: int = HYPER_CHANNELS
    cluster_grid: tuple[int, int] = (2, 2)
    sa_kernel: int = 7
    ca_reduction: int = 4
    mlp_ratio: int = 2
    synthesis_base: int = 32
    pqf_candidates: int = 2
    pqf_hidden: int = 32
    group_sizes: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise EngineError("exactly 4 stages are required")
        if self.hyper_channels != HYPER_CHANNELS:
            raise EngineError(f"hyper channel count is fixed at {HYPER_CHANNELS}")
        if self.group_sizes is None:
            object.__setattr__(self, "group_sizes", default_group_sizes(self.latent_channels))
        if sum(self.group_sizes) != self.latent_channels:
            raise EngineError("group sizes must sum to the latent channel count")

    def to_dict(self) -> dict:
        return {
            "stage_channels": list(self.stage_channels),
            "stage_depths": list(self.stage_depths),
            "latent_channels": self.latent_channels,
            "hyper_channels": self.hyper_channels,
            "cluster_grid": list(self.cluster_grid),
            "sa_kernel": self.sa_kernel,
            "ca_reduction": self.ca_reduction,
            "mlp_ratio": self.mlp_ratio,
            "synthesis_base": self.synthesis_base,
            "pqf_candidates": self.pqf_candidates,
            "pqf_hidden": self.pqf_hidden,
            "group_sizes": list(self.group_sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(
            stage_channels=tuple(d["stage_channels"]),
            stage_depths=tuple(d["stage_depths"]),
            latent_channels=d["latent_channels"],
            hyper_channels=d["hyper_channels"],
            cluster_grid=tuple(d["cluster_grid"]),
            sa_kernel=d["sa_kernel"],
            ca_reduction=d["ca_reduction"],
            mlp_ratio=d["mlp_ratio"],
            synthesis_base=d["synthesis_base"],
            pqf_candidates=d["pqf_candidates"],
            pqf_hidden=d["pqf_hidden"],
            group_sizes=tuple(d["group_sizes"]),
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()[:8]


SMALL_CONFIG = ArchConfig(
    stage_channels=(32, 48, 64, 64),
    stage_depths=(1, 1, 2, 1),
    latent_channels=64,
    synthesis_base=16,
    pqf_hidden=16,
)

# desk-scale trainer default: small enough for minute-scale optimization runs
TOY_CONFIG = ArchConfig(
    stage_channels=(16, 24, 32, 32),
    stage_depths=(1, 1, 1, 1),
    latent_channels=32,
    synthesis_base=8,
    pqf_hidden=8,
)


# ---------------------------------------------------------------------------
# Positional encoding and padding
# ---------------------------------------------------------------------------

def positional_encode(image: Tensor) -> Tensor:
    """(3, H, W) RGB in [0,1] -> (5, H, W) with x,y coordinates in [-1, 1]."""
    c, h, w = image.data.shape
    if c != 3:
        raise EngineError(f"positional_encode expects 3 channels, got {c}")
    if h < 2 or w < 2:
        raise EngineError("image must be at least 2x2")
    dtype = image.data.dtype
    xs = (2.0 * np.arange(w) - (w - 1)) / (w - 1)
    ys = (2.0 * np.arange(h) - (h - 1)) / (h - 1)
    coords = np.stack([np.tile(xs, (h, 1)), np.tile(ys[:, None], (1, w))]).astype(dtype)
    return eg.concat([image, eg.constant(coords)], axis=0)


def pad_to_multiple(arr: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Replicate-pad a (C, H, W) array on the bottom/right."""
    _, h, w = arr.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode="edge")


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class Ccb(Module):
    """Metaformer-style block: clustering + spatial attention as token mixer,
    MLP + channel attention as channel mixer, residuals around both."""

    def __init__(self, rng, channels: int, cfg: ArchConfig, dtype=np.float32):
        self.ln1 = LayerNorm(channels, dtype)
        self.cluster = ClusterParams(rng, channels, grid=cfg.cluster_grid, dtype=dtype)
        self.sa = SpatialAttnParams(rng, k=cfg.sa_kernel, dtype=dtype)
        self.ln2 = LayerNorm(channels, dtype)
        self.mlp = Mlp(rng, channels, cfg.mlp_ratio * channels, channels, dtype)
        self.ca = ChannelAttnParams(rng, channels, reduction=cfg.ca_reduction, dtype=dtype)

    def __call__(self, x: Tensor, checkerboard: bool) -> Tensor:
        y = eg.add(x, spatial_attention(cluster_mix(self.ln1(x), self.cluster, checkerboard), self.sa))
        return eg.add(y, channel_attention(self.mlp(self.ln2(y)), self.ca))


class Downsample(Module):
    """MLP -> unshuffle(2) -> layer norm -> linear to the stage width."""

    def __init__(self, rng, in_ch: int, out_ch: int, mlp_ratio: int, dtype=np.float32):
        self.mlp = Mlp(rng, in_ch, mlp_ratio * in_ch, in_ch, dtype)
        self.norm = LayerNorm(4 * in_ch, dtype)
        self.proj = Linear(rng, 4 * in_ch, out_ch, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        _, h, w = x.data.shape
        if h % 2 or w % 2:
            raise EngineError(f"downsample needs even dims, got {h}x{w}")
        return self.proj(self.norm(eg.pixel_unshuffle(self.mlp(x), 2)))


class Upsample(Module):
    """Linear to 4x the target width, then shuffle(2)."""

    def __init__(self, rng, in_ch: int, out_ch: int, dtype=np.float32):
        self.proj = Linear(rng, in_ch, 4 * out_ch, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return eg.pixel_shuffle(self.proj(x), 2)


class AnalysisTransform(Module):
    def __init__(self, rng, cfg: ArchConfig, dtype=np.float32):
        self.cfg = cfg
        widths = cfg.stage_channels
        self.downs = [Downsample(rng, w_in, w_out, cfg.mlp_ratio, dtype)
                      for w_in, w_out in zip((5,) + widths[:-1], widths)]
        self.blocks = [[Ccb(rng, widths[i], cfg, dtype) for _ in range(cfg.stage_depths[i])]
                       for i in range(4)]
        self.proj = (Linear(rng, widths[-1], cfg.latent_channels, dtype)
                     if widths[-1] != cfg.latent_channels else None)

    def __call__(self, image: Tensor) -> Tensor:
        x = positional_encode(image)
        for down, blocks in zip(self.downs, self.blocks):
            x = down(x)
            for i, blk in enumerate(blocks):
                x = blk(x, checkerboard=(i % 2 == 1))  # 2nd, 4th, ... block
        if self.proj is not None:
            x = self.proj(x)
        return x


class SynthesisTransform(Module):
    def __init__(self, rng, cfg: ArchConfig, dtype=np.float32):
        self.cfg = cfg
        widths = cfg.stage_channels
        self.proj = (Linear(rng, cfg.latent_channels, widths[-1], dtype)
                     if widths[-1] != cfg.latent_channels else None)
        self.blocks = [[Ccb(rng, widths[i], cfg, dtype) for _ in range(cfg.stage_depths[i])]
                       for i in range(4)]
        outs = (cfg.synthesis_base,) + widths[:-1]
        self.ups = [Upsample(rng, widths[i], outs[i], dtype) for i in range(4)]
        self.final = Conv2d(rng, cfg.synthesis_base, 3, 5, stride=1, padding=2, dtype=dtype)

    def __call__(self, y: Tensor) -> Tensor:
        x = self.proj(y) if self.proj is not None else y
        for i in range(3, -1, -1):
            for j, blk in enumerate(self.blocks[i]):
                x = blk(x, checkerboard=(j % 2 == 1))
            x = self.ups[i](x)
        return self.final(x)


# ---------------------------------------------------------------------------
# Hyper networks
# ---------------------------------------------------------------------------

class HyperEncoder(Module):
    """Five 3x3 convolutions (two stride-2) with GELU except after the last."""

    def __init__(self, rng, cfg: ArchConfig, dtype=np.float32):
        hc = cfg.hyper_channels
        chans = [cfg.latent_channels, hc, hc, hc, hc, hc]
        strides = [1, 2, 1, 2, 1]
        self.convs = [Conv2d(rng, chans[i], chans[i + 1], 3, stride=strides[i], padding=1, dtype=dtype)
                      for i in range(5)]

    def __call__(self, y: Tensor) -> Tensor:
        x = y
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < 4:
                x = eg.gelu(x)
        return x


class HyperDecoder(Module):
    """Mirror of the hyper encoder: two 4x4 stride-2 transposed convolutions
    among five layers; output cropped to the latent grid size."""

    def __init__(self, rng, cfg: ArchConfig, out_ch: int | None = None, dtype=np.float32):
        hc = cfg.hyper_channels
        out_ch = out_ch if out_ch is not None else cfg.latent_channels
        self.c1 = Conv2d(rng, hc, hc, 3, stride=1, padding=1, dtype=dtype)
        self.t1 = Conv2d(rng, hc, hc, 4, stride=2, padding=1, dtype=dtype, transposed=True)
        self.c2 = Conv2d(rng, hc, hc, 3, stride=1, padding=1, dtype=dtype)
        self.t2 = Conv2d(rng, hc, hc, 4, stride=2, padding=1, dtype=dtype, transposed=True)
        self.c3 = Conv2d(rng, hc, out_ch, 3, stride=1, padding=1, dtype=dtype)

    def __call__(self, z_hat: Tensor, out_hw: tuple[int, int]) -> Tensor:
        x = eg.gelu(self.c1(z_hat))
        x = eg.gelu(self.t1(x))
        x = eg.gelu(self.c2(x))
        x = eg.gelu(self.t2(x))
        oh, ow = out_hw
        if x.data.shape[1] < oh or x.data.shape[2] < ow:
            raise EngineError(f"hyper decoder output {x.data.shape} smaller than target {out_hw}")
        x = eg.narrow(eg.narrow(x, 1, 0, oh), 2, 0, ow)
        return self.c3(x)


def scale_floor(raw: Tensor) -> Tensor:
    """Map an unconstrained grid to sigma >= SIGMA_MIN."""
    return eg.add(eg.softplus(raw), eg.constant(SIGMA_MIN, dtype=raw.data.dtype))
