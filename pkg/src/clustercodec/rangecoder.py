"""Bit-exact integer range coder and integer frequency tables.

The coder is a carry-counting byte-oriented range coder (64-bit low, 32-bit
range, renormalized one byte at a time). All arithmetic is integer-only, so
identical inputs produce identical bytes on every platform and run.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _special

from .errors import DecodeError

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS  # cumulative frequency total of every table
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

SIGMA_MIN = 0.11
SYMBOL_CLIP = 255  # symbols live in [-255, 255] before offset removal
RANGE_SIGMAS = 32.0  # table spans mu +/- 32 sigma


class FreqTable:
    """Integer frequency table over a contiguous symbol range [s_min, s_max]."""

    def __init__(self, s_min: int, freqs):
        freqs = np.asarray(freqs, dtype=np.int64)
        if freqs.ndim != 1 or freqs.size < 1:
            raise ValueError("freqs must be a non-empty 1-D array")
        if (freqs < 1).any():
            raise ValueError("every symbol frequency must be >= 1")
        if int(freqs.sum()) != TOTAL:
            raise ValueError(f"frequencies must sum to {TOTAL}, got {int(freqs.sum())}")
        self.s_min = int(s_min)
        self.freqs = freqs
        self.cum = np.concatenate([[0], np.cumsum(freqs)])

    @property
    def s_max(self) -> int:
        return self.s_min + self.freqs.size - 1

    def clamp(self, symbol: int) -> int:
        """Saturate a symbol into the table range."""
        return min(max(symbol, self.s_min), self.s_max)

    def entry(self, symbol: int) -> tuple[int, int]:
        idx = symbol - self.s_min
        if idx < 0 or idx >= self.freqs.size:
            raise ValueError(f"symbol {symbol} outside table range [{self.s_min}, {self.s_max}]")
        return int(self.cum[idx]), int(self.freqs[idx])

    def bits(self, symbol: int) -> float:
        _, f = self.entry(symbol)
        return TOTAL_BITS - math.log2(f)

    def find(self, value: int) -> int:
        """Symbol whose cumulative interval contains `value`."""
        idx = int(np.searchsorted(self.cum, value, side="right")) - 1
        return self.s_min + idx


def uniform_table(s_min: int, s_max: int) -> FreqTable:
    n = s_max - s_min + 1
    base = TOTAL // n
    freqs = np.full(n, base, dtype=np.int64)
    freqs[: TOTAL - base * n] += 1
    return FreqTable(s_min, freqs)


# ---------------------------------------------------------------------------
# Coder core
# ---------------------------------------------------------------------------

class RangeEncoder:
    def __init__(self) -> None:
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def encode(self, cum: int, freq: int, total: int = TOTAL) -> None:
        r = self._range // total
        self._low += r * cum
        self._range = r * freq
        while self._range < _TOP:
            self._shift_low()
            self._range <<= 8

    def _shift_low(self) -> None:
        low = self._low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self._cache
            while self._cache_size:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
            self._cache = (low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (low & 0xFFFFFF) << 8

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._byte()  # first byte only ever carries encoder overflow
        for _ in range(4):
            self._code = (self._code << 8) | self._byte()

    def _byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("range-coded substream truncated", offset=self._pos)
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_target(self, total: int = TOTAL) -> int:
        r = self._range // total
        return min(self._code // r, total - 1)

    def decode_update(self, cum: int, freq: int, total: int = TOTAL) -> None:
        r = self._range // total
        self._code -= r * cum
        self._range = r * freq
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._byte()) & ((1 << 40) - 1)
            self._range <<= 8

    def decode_symbol(self, table: FreqTable) -> int:
        sym = table.find(self.decode_target())
        cum, freq = table.entry(sym)
        self.decode_update(cum, freq)
        return sym


def range_encode(symbols, tables) -> bytes:
    """Encode symbols[i] under tables[i] (or one shared table) to bytes."""
    enc = RangeEncoder()
    shared = isinstance(tables, FreqTable)
    for i, s in enumerate(symbols):
        t = tables if shared else tables[i]
        cum, freq = t.entry(int(s))
        enc.encode(cum, freq)
    return enc.finish()


def range_decode(data: bytes, tables, count: int | None = None) -> list[int]:
    """Exact inverse of range_encode; raises DecodeError on corrupt input."""
    shared = isinstance(tables, FreqTable)
    n = count if shared else len(tables)
    if n is None:
        raise ValueError("count is required with a shared table")
    dec = RangeDecoder(data)
    return [dec.decode_symbol(tables if shared else tables[i]) for i in range(n)]


def estimate_bits(symbols, tables) -> float:
    shared = isinstance(tables, FreqTable)
    total = 0.0
    for i, s in enumerate(symbols):
        t = tables if shared else tables[i]
        total += t.bits(int(s))
    return total


# ---------------------------------------------------------------------------
# Gaussian table sets
# ---------------------------------------------------------------------------

class GaussianTableSet:
    """Per-element integer tables discretizing N(mu, sigma^2) over integers.

    p(k) is proportional to Phi((k - mu + 0.5)/sigma) - Phi((k - mu - 0.5)/sigma)
    over a clipped symbol range, renormalized to 16-bit integer frequencies with
    a per-symbol floor of 1. Built vectorized for a whole latent tensor.
    """

    def __init__(self, mu: np.ndarray, sigma: np.ndarray):
        mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
        if (sigma < SIGMA_MIN - 1e-9).any():
            raise ValueError("sigma below floor")
        n = mu.size
        kmin = np.clip(np.floor(mu - RANGE_SIGMAS * sigma), -SYMBOL_CLIP, SYMBOL_CLIP).astype(np.int64)
        kmax = np.clip(np.ceil(mu + RANGE_SIGMAS * sigma), -SYMBOL_CLIP, SYMBOL_CLIP).astype(np.int64)
        counts = kmax - kmin + 1
        width = int(counts.max())
        ks = kmin[:, None] + np.arange(width)[None, :]
        valid = ks <= kmax[:, None]
        z_hi = (ks - mu[:, None] + 0.5) / sigma[:, None]
        z_lo = (ks - mu[:, None] - 0.5) / sigma[:, None]
        p = _special.ndtr(z_hi) - _special.ndtr(z_lo)
        p[~valid] = 0.0
        p_sum = p.sum(axis=1, keepdims=True)
        p = np.divide(p, p_sum, out=np.zeros_like(p), where=p_sum > 0)
        scale = (TOTAL - counts).astype(np.float64)
        exact = p * scale[:, None]
        freqs = np.floor(exact).astype(np.int64) + valid.astype(np.int64)
        residual = TOTAL - freqs.sum(axis=1)
        # hand out the shortfall by largest remainder, ties to the lowest index
        rem = np.where(valid, exact - np.floor(exact), -1.0)
        order = np.argsort(-rem, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.broadcast_to(np.arange(width), order.shape).copy(), axis=1)
        freqs += rank < residual[:, None]
        self.kmin = kmin
        self.counts = counts
        self.freqs = freqs
        self.cum = np.concatenate([np.zeros((n, 1), dtype=np.int64), np.cumsum(freqs, axis=1)], axis=1)
        self.n = n

    def clamp_symbols(self, symbols: np.ndarray) -> tuple[np.ndarray, int]:
        """Saturate symbols into each table's range; returns count clamped."""
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        kmax = self.kmin + self.counts - 1
        clipped = np.clip(symbols, self.kmin, kmax)
        return clipped, int((clipped != symbols).sum())

    def encode(self, symbols: np.ndarray, enc: RangeEncoder) -> None:
        idx = np.asarray(symbols, dtype=np.int64).reshape(-1) - self.kmin
        if (idx < 0).any() or (idx >= self.counts).any():
            raise ValueError("symbol outside table range; clamp first")
        cums = self.cum[np.arange(self.n), idx]
        fs = self.freqs[np.arange(self.n), idx]
        for c, f in zip(cums.tolist(), fs.tolist()):
            enc.encode(c, f)

    def decode(self, dec: RangeDecoder) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        cumrows = self.cum
        for i in range(self.n):
            v = dec.decode_target()
            row = cumrows[i]
            idx = int(np.searchsorted(row, v, side="right")) - 1
            dec.decode_update(int(row[idx]), int(row[idx + 1] - row[idx]))
            out[i] = self.kmin[i] + idx
        return out

    def bits(self, symbols: np.ndarray) -> float:
        idx = np.asarray(symbols, dtype=np.int64).reshape(-1) - self.kmin
        fs = self.freqs[np.arange(self.n), idx].astype(np.float64)
        return float((TOTAL_BITS - np.log2(fs)).sum())


def gaussian_freq(mu_frac: float, sigma: float) -> FreqTable:
    """Single-element Gaussian table (convenience over GaussianTableSet)."""
    ts = GaussianTableSet(np.array([mu_frac]), np.array([max(sigma, SIGMA_MIN)]))
    return FreqTable(int(ts.kmin[0]), ts.freqs[0, : int(ts.counts[0])])
