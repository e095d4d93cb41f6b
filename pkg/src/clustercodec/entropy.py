"""Entropy modeling: factorized prior for the hyper latent and the
space-channel context schedule (checkerboard anchors x uneven channel groups)
for the main latent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import Module, Tensor
from .errors import DecodeError
from .layers import Conv2d
from .quantizers import offset_symbols
from .rangecoder import (SIGMA_MIN, GaussianTableSet, RangeDecoder, RangeEncoder)
from .transform import ArchConfig, scale_floor


def anchor_mask(h: int, w: int) -> np.ndarray:
    """Checkerboard anchors: (row + col) even."""
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ((rr + cc) % 2) == 0


@dataclass
class GroupSchedule:
    """Uneven channel groups plus the spatial anchor split for each group."""

    sizes: tuple[int, ...]

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return out


class FactorizedPrior(Module):
    """Learned per-channel Gaussian (mu_c, sigma_c) for the hyper latent."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mu = eg.parameter(np.zeros(channels), dtype=dtype)
        self.sigma_raw = eg.parameter(np.ones(channels), dtype=dtype)

    def mu_sigma(self, h: int, w: int) -> tuple[Tensor, Tensor]:
        mu = eg.reshape(self.mu, (-1, 1, 1))
        sigma = eg.reshape(scale_floor(self.sigma_raw), (-1, 1, 1))
        shape = (self.mu.data.shape[0], h, w)
        return (eg.mul(mu, eg.constant(np.ones(shape, dtype=self.mu.data.dtype))),
                eg.mul(sigma, eg.constant(np.ones(shape, dtype=self.mu.data.dtype))))


class ContextModel(Module):
    """Per-group parameter networks over hyper features, previously decoded
    groups, and a masked 5x5 spatial context over decoded anchors."""

    def __init__(self, rng: np.random.Generator, cfg: ArchConfig, dtype=np.float32):
        self.schedule = GroupSchedule(cfg.group_sizes)
        m = cfg.latent_channels
        self.spatial = []
        self.net_a = []
        self.net_b = []
        prev = 0
        for size in cfg.group_sizes:
            self.spatial.append(Conv2d(rng, size, size, 5, stride=1, padding=2, dtype=dtype))
            in_ch = 2 * m + prev + size
            hidden = max(32, 2 * size)
            self.net_a.append(Conv2d(rng, in_ch, hidden, 1, padding=0, dtype=dtype))
            self.net_b.append(Conv2d(rng, hidden, 2 * size, 1, padding=0, dtype=dtype))
            prev += size

    def group_params(self, g: int, mean_feat: Tensor, scale_feat: Tensor,
                     prev: Tensor | None, spatial_ctx: Tensor) -> tuple[Tensor, Tensor]:
        parts = [mean_feat, scale_feat]
        if prev is not None:
            parts.append(prev)
        parts.append(spatial_ctx)
        x = eg.concat(parts, axis=0)
        out = self.net_b[g](eg.gelu(self.net_a[g](x)))
        size = self.schedule.sizes[g]
        mu = eg.narrow(out, 0, 0, size)
        sigma = scale_floor(eg.narrow(out, 0, size, size))
        return mu, sigma


def _mask_encode(enc: RangeEncoder, values: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                 mask: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Encode round(values - mu) at masked positions; returns reconstructed
    values at those positions (flat), estimated bits, and clamp count."""
    vals = values[:, mask]
    mus = mu[:, mask]
    sigs = np.maximum(sigma[:, mask], SIGMA_MIN)
    tables = GaussianTableSet(np.zeros(vals.size), sigs.reshape(-1))
    symbols, clamped = tables.clamp_symbols(offset_symbols(vals, mus).reshape(-1))
    tables.encode(symbols, enc)
    recon = symbols.reshape(vals.shape) + mus
    return recon, tables.bits(symbols), clamped


def _mask_decode(dec: RangeDecoder, mu: np.ndarray, sigma: np.ndarray,
                 mask: np.ndarray) -> np.ndarray:
    mus = mu[:, mask]
    sigs = np.maximum(sigma[:, mask], SIGMA_MIN)
    tables = GaussianTableSet(np.zeros(mus.size), sigs.reshape(-1))
    symbols = tables.decode(dec)
    return symbols.reshape(mus.shape) + mus


@dataclass
class CodingReport:
    bits_estimated: float
    clamped: int


def scctx_encode(y: np.ndarray, mean_feat: np.ndarray, scale_feat: np.ndarray,
                 model: ContextModel) -> tuple[list[bytes], np.ndarray, CodingReport]:
    """Encode the latent as one substream per channel group.

    Within each group anchors are coded from hyper features plus previously
    decoded groups; non-anchors additionally see a masked 5x5 convolution over
    the decoded anchors. Returns the dequantized latent the decoder will see.
    """
    _, h, w = y.shape
    anchors = anchor_mask(h, w)
    mean_t = eg.constant(mean_feat)
    scale_t = eg.constant(scale_feat)
    dtype = mean_feat.dtype
    streams: list[bytes] = []
    decoded: list[np.ndarray] = []
    bits = 0.0
    clamped = 0
    for g, (size, off) in enumerate(zip(model.schedule.sizes, model.schedule.offsets)):
        y_g = y[off:off + size]
        prev = eg.constant(np.concatenate(decoded, axis=0)) if decoded else None
        enc = RangeEncoder()

        zero_ctx = eg.constant(np.zeros((size, h, w), dtype=dtype))
        mu_a, sig_a = model.group_params(g, mean_t, scale_t, prev, zero_ctx)
        y_hat_g = np.zeros_like(y_g)
        recon_a, b, c = _mask_encode(enc, y_g, mu_a.data, sig_a.data, anchors)
        y_hat_g[:, anchors] = recon_a
        bits += b
        clamped += c

        ctx = model.spatial[g](eg.constant((y_hat_g * anchors[None]).astype(dtype)))
        mu_b, sig_b = model.group_params(g, mean_t, scale_t, prev, ctx)
        recon_b, b, c = _mask_encode(enc, y_g, mu_b.data, sig_b.data, ~anchors)
        y_hat_g[:, ~anchors] = recon_b
        bits += b
        clamped += c

        streams.append(enc.finish())
        decoded.append(y_hat_g.astype(dtype))
    y_hat = np.concatenate(decoded, axis=0)
    return streams, y_hat, CodingReport(bits, clamped)


def scctx_decode(streams: list[bytes], mean_feat: np.ndarray, scale_feat: np.ndarray,
                 model: ContextModel) -> np.ndarray:
    """Exact inverse of scctx_encode; regenerates identical (mu, sigma)."""
    if len(streams) != len(model.schedule.sizes):
        raise DecodeError(f"expected {len(model.schedule.sizes)} group substreams, got {len(streams)}")
    _, h, w = mean_feat.shape
    anchors = anchor_mask(h, w)
    mean_t = eg.constant(mean_feat)
    scale_t = eg.constant(scale_feat)
    dtype = mean_feat.dtype
    decoded: list[np.ndarray] = []
    for g, size in enumerate(model.schedule.sizes):
        prev = eg.constant(np.concatenate(decoded, axis=0)) if decoded else None
        dec = RangeDecoder(streams[g])

        zero_ctx = eg.constant(np.zeros((size, h, w), dtype=dtype))
        mu_a, sig_a = model.group_params(g, mean_t, scale_t, prev, zero_ctx)
        y_hat_g = np.zeros((size, h, w))
        y_hat_g[:, anchors] = _mask_decode(dec, mu_a.data, sig_a.data, anchors)

        ctx = model.spatial[g](eg.constant((y_hat_g * anchors[None]).astype(dtype)))
        mu_b, sig_b = model.group_params(g, mean_t, scale_t, prev, ctx)
        y_hat_g[:, ~anchors] = _mask_decode(dec, mu_b.data, sig_b.data, ~anchors)

        decoded.append(y_hat_g.astype(dtype))
    return np.concatenate(decoded, axis=0)


# ---------------------------------------------------------------------------
# Differentiable rate estimates (training path)
# ---------------------------------------------------------------------------

_SQRT2 = float(np.sqrt(2.0))
_LOG2E = float(np.log2(np.e))


def likelihood_bits(x: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Sum of -log2 P(x in round-off bin | N(mu, sigma^2)), differentiable."""
    hi = eg.div(eg.add(eg.sub(x, mu), eg.constant(0.5, dtype=x.data.dtype)),
                eg.mul(sigma, eg.constant(_SQRT2, dtype=x.data.dtype)))
    lo = eg.div(eg.sub(eg.sub(x, mu), eg.constant(0.5, dtype=x.data.dtype)),
                eg.mul(sigma, eg.constant(_SQRT2, dtype=x.data.dtype)))
    p = eg.mul(eg.sub(eg.erf(hi), eg.erf(lo)), eg.constant(0.5, dtype=x.data.dtype))
    p = eg.add(p, eg.constant(1e-9, dtype=x.data.dtype))
    return eg.mul(eg.sum_(eg.log(p)), eg.constant(-_LOG2E, dtype=x.data.dtype))


def scctx_train_params(y_noisy: Tensor, mean_feat: Tensor, scale_feat: Tensor,
                       model: ContextModel) -> tuple[Tensor, Tensor]:
    """Full-grid (mu, sigma) for the training path, built from the same group
    schedule with the noisy latent standing in for decoded values."""
    _, h, w = y_noisy.data.shape
    anchors = anchor_mask(h, w)
    a_mask = eg.constant(anchors[None].astype(y_noisy.data.dtype))
    na_mask = eg.constant((~anchors)[None].astype(y_noisy.data.dtype))
    mus, sigmas = [], []
    prev_parts: list[Tensor] = []
    for g, (size, off) in enumerate(zip(model.schedule.sizes, model.schedule.offsets)):
        y_g = eg.narrow(y_noisy, 0, off, size)
        prev = eg.concat(prev_parts, axis=0) if prev_parts else None
        zero_ctx = eg.constant(np.zeros((size, h, w), dtype=y_noisy.data.dtype))
        mu_a, sig_a = model.group_params(g, mean_feat, scale_feat, prev, zero_ctx)
        ctx = model.spatial[g](eg.mul(y_g, a_mask))
        mu_b, sig_b = model.group_params(g, mean_feat, scale_feat, prev, ctx)
        mus.append(eg.add(eg.mul(mu_a, a_mask), eg.mul(mu_b, na_mask)))
        sigmas.append(eg.add(eg.mul(sig_a, a_mask), eg.mul(sig_b, na_mask)))
        prev_parts.append(y_g)
    return eg.concat(mus, axis=0), eg.concat(sigmas, axis=0)
