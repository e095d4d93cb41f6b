"""End-to-end codec: model assembly, encode/decode pipelines, training loop,
and complexity accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .container import Container, read_container, write_container, save_weights, load_weights
from .engine import Module, Tape, Tensor
from .entropy import (ContextModel, FactorizedPrior, likelihood_bits,
                      scctx_decode, scctx_encode, scctx_train_params)
from .errors import DecodeError, WeightsError
from .layers import Conv2d
from .pqf import (CandidateNet, apply_filter, clamp_count, dequantize_coefficients,
                  gen_candidates, pqf_loss, quantize_coefficients, solve_all_channels)
from .quantizers import dsq, offset_symbols
from .rangecoder import GaussianTableSet, RangeDecoder, RangeEncoder
from .transform import (PAD_MULTIPLE, AnalysisTransform, ArchConfig, HyperDecoder,
                        HyperEncoder, SynthesisTransform, pad_to_multiple)

# rate-distortion operating points: loss = bpp + lambda * (255^2 * MSE)
LAMBDA_PRESETS = {1: 0.0018, 2: 0.0035, 3: 0.0067, 4: 0.0130, 5: 0.0250, 6: 0.0483}

DSQ_K = 4.0


class CodecModel(Module):
    """All learned pieces of the codec under one parameter namespace."""

    def __init__(self, cfg: ArchConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg if cfg is not None else ArchConfig()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        m = cfg.latent_channels
        self.analysis = AnalysisTransform(rng, cfg, dtype=dtype)
        self.synthesis = SynthesisTransform(rng, cfg, dtype=dtype)
        self.hyper_enc = HyperEncoder(rng, cfg, dtype=dtype)
        self.mean_dec = HyperDecoder(rng, cfg, dtype=dtype)
        self.scale_dec = HyperDecoder(rng, cfg, dtype=dtype)
        self.feat_dec = HyperDecoder(rng, cfg, dtype=dtype)
        self.fusion = Conv2d(rng, 2 * m, m, 1, padding=0, dtype=dtype)
        self.context = ContextModel(rng, cfg, dtype=dtype)
        self.prior = FactorizedPrior(cfg.hyper_channels, dtype=dtype)
        self.candidates = CandidateNet(rng, cfg, dtype=dtype)

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise WeightsError(f"weights do not match model: missing {sorted(missing)[:3]}, "
                               f"unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            if tensors[name].shape != p.data.shape:
                raise WeightsError(f"shape mismatch for {name}: "
                                   f"{tensors[name].shape} vs {p.data.shape}")
            p.data = tensors[name].astype(p.data.dtype)

    def save(self, path: str) -> None:
        save_weights(path, self.cfg, self.state_dict())

    @classmethod
    def load(cls, path: str) -> "CodecModel":
        cfg, tensors = load_weights(path)
        model = cls(cfg)
        model.load_state(tensors)
        return model

    # -- shared sub-pipelines ------------------------------------------------

    def hyper_features(self, z_hat: np.ndarray, y_hw: tuple[int, int]):
        zt = eg.constant(z_hat.astype(self.prior.mu.data.dtype))
        mean_feat = self.mean_dec(zt, y_hw).data
        scale_feat = self.scale_dec(zt, y_hw).data
        latent_feat = self.feat_dec(zt, y_hw).data
        return mean_feat, scale_feat, latent_feat

    def reconstruct(self, y_tilde: np.ndarray, latent_feat: np.ndarray) -> np.ndarray:
        dtype = self.fusion.kernel.data.dtype
        fused = self.fusion(eg.concat([eg.constant(y_tilde.astype(dtype)),
                                       eg.constant(latent_feat.astype(dtype))], axis=0))
        return np.clip(self.synthesis(fused).data, 0.0, 1.0)


def _z_tables(model: CodecModel, zh: int, zw: int):
    mu, sigma = model.prior.mu_sigma(zh, zw)
    mu64 = mu.data.astype(np.float64)
    tables = GaussianTableSet(np.zeros(mu64.size), sigma.data.astype(np.float64).reshape(-1))
    return mu64, tables


@dataclass
class EncodeReport:
    orig_hw: tuple[int, int]
    stream_bytes: int
    bits_estimated: float
    bpp: float
    psnr: float
    clamped_latent: int
    clamped_hyper: int
    clamped_coeffs: int
    ridge_fallbacks: int
    seconds: float
    use_pqf: bool
    latents: tuple[np.ndarray, np.ndarray] | None = None  # (z_hat, y_hat)

    def lines(self) -> list[str]:
        h, w = self.orig_hw
        return [
            f"image            {w}x{h}",
            f"stream bytes     {self.stream_bytes}",
            f"bpp              {self.bpp:.4f}",
            f"estimated bits   {self.bits_estimated:.1f}",
            f"psnr dB          {self.psnr:.2f}",
            f"filtering        {'on' if self.use_pqf else 'off'}",
            f"clamped symbols  latent={self.clamped_latent} hyper={self.clamped_hyper} "
            f"coeffs={self.clamped_coeffs}",
            f"ridge fallbacks  {self.ridge_fallbacks}",
            f"seconds          {self.seconds:.2f}",
        ]


def encode_array(img: np.ndarray, model: CodecModel, use_pqf: bool = True,
                 raw_coeffs: bool = False) -> tuple[bytes, EncodeReport]:
    """Compress a (3, H, W) float image in [0, 1] into a container byte string."""
    t0 = time.monotonic()
    _, orig_h, orig_w = img.shape
    dtype = model.fusion.kernel.data.dtype
    padded = pad_to_multiple(img.astype(dtype), PAD_MULTIPLE)

    y = model.analysis(eg.constant(padded)).data
    z = model.hyper_enc(eg.constant(y)).data
    _, zh, zw = z.shape

    mu_z, tables = _z_tables(model, zh, zw)
    sym_z, clamped_z = tables.clamp_symbols(
        offset_symbols(z.astype(np.float64), mu_z).reshape(-1))
    enc = RangeEncoder()
    tables.encode(sym_z, enc)
    z_stream = enc.finish()
    z_hat = (sym_z.reshape(z.shape) + mu_z).astype(dtype)
    z_bits = tables.bits(sym_z)

    mean_feat, scale_feat, latent_feat = model.hyper_features(z_hat, y.shape[1:])
    streams, y_hat, report = scctx_encode(y, mean_feat, scale_feat, model.context)

    coeff_codes = raw = None
    fallbacks = clamped_coeffs = 0
    coeff_bits = 0.0
    y_tilde = y_hat
    if use_pqf:
        n = model.cfg.pqf_candidates
        cands = gen_candidates(eg.constant(y_hat.astype(dtype)), model.candidates).data
        eps = (y - y_hat).astype(np.float64)
        coeffs, fallbacks = solve_all_channels(cands.astype(np.float64), eps, n)
        if raw_coeffs:
            raw = coeffs.astype(np.float32)
            used = raw.astype(np.float64)
            coeff_bits = raw.size * 32.0
        else:
            clamped_coeffs = clamp_count(coeffs)
            coeff_codes = quantize_coefficients(coeffs)
            used = dequantize_coefficients(coeff_codes)
            coeff_bits = coeff_codes.size * 4.0
        y_tilde = apply_filter(y_hat.astype(np.float64), cands.astype(np.float64),
                               used).astype(dtype)

    blob = write_container(Container(orig_h, orig_w, padded.shape[1], padded.shape[2],
                                     model.cfg.digest().hex(),
                                     coeff_codes, raw, z_stream, streams))
    rec = model.reconstruct(y_tilde, latent_feat)[:, :orig_h, :orig_w]
    from .imageio import psnr
    rep = EncodeReport(
        orig_hw=(orig_h, orig_w),
        stream_bytes=len(blob),
        bits_estimated=z_bits + report.bits_estimated + coeff_bits,
        bpp=8.0 * len(blob) / (orig_h * orig_w),
        psnr=psnr(img, rec.astype(np.float64)),
        clamped_latent=report.clamped,
        clamped_hyper=clamped_z,
        clamped_coeffs=clamped_coeffs,
        ridge_fallbacks=fallbacks,
        seconds=time.monotonic() - t0,
        use_pqf=use_pqf,
        latents=(z_hat, y_hat),
    )
    return blob, rep


def decode_latents(blob: bytes, model: CodecModel):
    """Entropy-decode a container down to the dequantized latents.

    Returns (container, z_hat, y_hat, latent_feat)."""
    c = read_container(blob)
    if c.config_digest != model.cfg.digest().hex():
        raise DecodeError("stream was produced with a different architecture "
                          f"config ({c.config_digest} != {model.cfg.digest().hex()})")
    dtype = model.fusion.kernel.data.dtype
    yh, yw = c.padded_h // PAD_MULTIPLE, c.padded_w // PAD_MULTIPLE
    zh = -(-(-(-yh // 2)) // 2)
    zw = -(-(-(-yw // 2)) // 2)

    mu_z, tables = _z_tables(model, zh, zw)
    dec = RangeDecoder(c.z_stream)
    sym_z = tables.decode(dec)
    z_hat = (sym_z.reshape((model.cfg.hyper_channels, zh, zw)) + mu_z.reshape(
        (model.cfg.hyper_channels, zh, zw))).astype(dtype)

    mean_feat, scale_feat, latent_feat = model.hyper_features(z_hat, (yh, yw))
    y_hat = scctx_decode(c.group_streams, mean_feat, scale_feat, model.context).astype(dtype)
    return c, z_hat, y_hat, latent_feat


def decode_array(blob: bytes, model: CodecModel) -> np.ndarray:
    """Decompress a container byte string back to a (3, H, W) image in [0, 1]."""
    c, z_hat, y_hat, latent_feat = decode_latents(blob, model)
    dtype = model.fusion.kernel.data.dtype

    y_tilde = y_hat
    if c.coeff_codes is not None or c.raw_coeffs is not None:
        n = model.cfg.pqf_candidates
        coeffs = (c.raw_coeffs.astype(np.float64) if c.raw_coeffs is not None
                  else dequantize_coefficients(c.coeff_codes))
        if coeffs.shape != (model.cfg.latent_channels, n):
            raise DecodeError(f"coefficient block shape {coeffs.shape} does not match "
                              f"model ({model.cfg.latent_channels}, {n})")
        cands = gen_candidates(eg.constant(y_hat), model.candidates).data
        y_tilde = apply_filter(y_hat.astype(np.float64), cands.astype(np.float64),
                               coeffs).astype(dtype)

    rec = model.reconstruct(y_tilde, latent_feat)
    return rec[:, :c.orig_h, :c.orig_w].astype(np.float64)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_loss(model: CodecModel, img: np.ndarray, lam: float,
               rng: np.random.Generator, lam_pqf: float = 1.0) -> Tensor:
    """Rate + lambda * distortion + filtering gain, all differentiable.

    Rate terms use additive uniform noise as the quantizer stand-in; the
    decoder path uses the smooth surrogate rounding so distortion gradients
    reach the analysis transform.
    """
    dtype = model.fusion.kernel.data.dtype
    x = eg.constant(img.astype(dtype))
    y = model.analysis(x)

    z = model.hyper_enc(y)
    z_noise = eg.constant(rng.uniform(-0.5, 0.5, size=z.data.shape).astype(dtype))
    z_noisy = eg.add(z, z_noise)
    mu_z, sigma_z = model.prior.mu_sigma(*z.data.shape[1:])
    bits_z = likelihood_bits(z_noisy, mu_z, sigma_z)

    y_hw = y.data.shape[1:]
    mean_feat = model.mean_dec(z_noisy, y_hw)
    scale_feat = model.scale_dec(z_noisy, y_hw)
    latent_feat = model.feat_dec(z_noisy, y_hw)

    y_noise = eg.constant(rng.uniform(-0.5, 0.5, size=y.data.shape).astype(dtype))
    y_noisy = eg.add(y, y_noise)
    mu_y, sigma_y = scctx_train_params(y_noisy, mean_feat, scale_feat, model.context)
    bits_y = likelihood_bits(y_noisy, mu_y, sigma_y)

    y_dec = dsq(y, DSQ_K)
    fused = model.fusion(eg.concat([y_dec, latent_feat], axis=0))
    rec = model.synthesis(fused)
    mse = eg.mean(eg.square(eg.sub(rec, x)))

    eps = (y.data - y_dec.data).astype(np.float64)
    gain = pqf_loss(gen_candidates(y_dec, model.candidates), eps)

    pixels = float(img.shape[1] * img.shape[2])
    bpp = eg.mul(eg.add(bits_z, bits_y), eg.constant(1.0 / pixels, dtype=dtype))
    dist = eg.mul(mse, eg.constant(lam * 255.0 ** 2, dtype=dtype))
    return eg.add(eg.add(bpp, dist),
                  eg.mul(gain, eg.constant(lam_pqf / pixels, dtype=gain.data.dtype)))


class Adam:
    """Adam with bias correction; stepless hyperparameters held fixed."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) /
                      (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)
    aborted: bool = False
    seconds: float = 0.0

    @property
    def improvement(self) -> float:
        """Fractional drop of the smoothed loss from start to finish."""
        if len(self.smoothed) < 2 or self.smoothed[0] == 0:
            return 0.0
        return 1.0 - self.smoothed[-1] / self.smoothed[0]


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    _, h, w = img.shape
    if h < size or w < size:
        reps = (1, -(-size // h), -(-size // w))
        img = np.tile(img, reps)
        _, h, w = img.shape
    r = rng.integers(0, h - size + 1)
    c = rng.integers(0, w - size + 1)
    return img[:, r:r + size, c:c + size]


def train_toy(model: CodecModel, images: list[np.ndarray], lam: float,
              steps: int = 200, seed: int = 0, crop: int = 64, batch: int = 8,
              lr: float = 1e-4, smooth: float = 0.9) -> TrainResult:
    """Short optimization run on random crops; bit-deterministic under a seed.

    The engine has no batch dimension, so each step sums gradients over
    `batch` crops and scales by 1/batch before the optimizer update. A
    non-finite loss aborts training and restores the last finite-loss
    parameter state.
    """
    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Adam(params, lr=lr)
    result = TrainResult()
    checkpoint = [p.data.copy() for p in params]
    ema = None
    for _ in range(steps):
        model.zero_grad()
        total = 0.0
        finite = True
        for _ in range(batch):
            img = images[rng.integers(0, len(images))]
            patch = random_crop(img, crop, rng)
            with Tape() as tape:
                loss = train_loss(model, patch, lam, rng)
            value = float(loss.data)
            if not np.isfinite(value):
                finite = False
                break
            eg.backward(tape, loss)
            total += value
        if not finite:
            for p, saved in zip(params, checkpoint):
                p.data = saved
            result.aborted = True
            break
        checkpoint = [p.data.copy() for p in params]
        for p in params:
            if p.grad is not None:
                p.grad = p.grad / batch
        opt.step()
        value = total / batch
        ema = value if ema is None else smooth * ema + (1 - smooth) * value
        result.losses.append(value)
        result.smoothed.append(ema)
    result.seconds = time.monotonic() - t0
    return result


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------

def model_stats(model: CodecModel, ref_hw: tuple[int, int] = (256, 256)) -> dict:
    """Parameter count plus an analytic multiply-accumulate estimate.

    MACs are counted as (weight elements) x (spatial positions the layer is
    applied at) for a reference input size, walking the same resolution
    schedule the transforms use.
    """
    cfg = model.cfg
    h, w = ref_hw
    macs = 0

    def dense_like(p: Tensor, positions: int) -> int:
        return int(p.data.size) * positions

    # analysis / synthesis stages run at /2, /4, /8, /16 of the input;
    # every weight tensor is applied once per grid cell at its stage resolution
    res = [(h >> (i + 1)) * (w >> (i + 1)) for i in range(4)]

    def walk(mod: Module, positions: int) -> int:
        return sum(dense_like(p, positions) for _, p in mod.named_parameters())

    for i in range(4):
        macs += walk(model.analysis.downs[i], res[i])
        for blk in model.analysis.blocks[i]:
            macs += walk(blk, res[i])
        for blk in model.synthesis.blocks[i]:
            macs += walk(blk, res[i])
        macs += walk(model.synthesis.ups[i], res[i])
    macs += walk(model.synthesis.final, h * w)
    if model.analysis.proj is not None:
        macs += walk(model.analysis.proj, res[3])
    if model.synthesis.proj is not None:
        macs += walk(model.synthesis.proj, res[3])

    y_pos = res[3]
    z_pos = max(1, y_pos // 16)
    macs += walk(model.hyper_enc, z_pos * 4)
    for dec in (model.mean_dec, model.scale_dec, model.feat_dec):
        macs += walk(dec, y_pos)
    macs += walk(model.fusion, y_pos)
    macs += walk(model.context, y_pos)
    macs += walk(model.candidates, y_pos)

    return {
        "parameters": model.param_count(),
        "macs_estimate": macs,
        "macs_per_pixel": macs / (h * w),
        "reference_hw": ref_hw,
        "config": cfg.to_dict(),
    }
