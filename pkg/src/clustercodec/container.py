"""On-disk formats: the compressed-image container and the weights file.

Container layout (little-endian):

    magic            4 bytes  b"CLC1"
    version          u16
    payload_crc32    u32      over everything after this field
    orig_h, orig_w   u32 x 2
    padded_h/w       u32 x 2  must equal orig rounded up to the pad multiple
    config_digest    8 bytes  hex digest prefix of the architecture config
    flags            u8       bit0: filtering coefficients present
                              bit1: coefficients stored as raw float32
    coeff block      (only if bit0 set)
        n_candidates u8
        channels     u16
        codes        packed 4-bit, two per byte, channel-major
                     (or channels * n * 4 bytes of float32 when raw)
    z stream         u32 length + bytes
    group count      u8
    per group        u32 length + bytes

The CRC turns any bit flip into a typed decode error before model code runs.
Truncations are caught by length checks with the failing byte offset.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DecodeError, WeightsError
from .transform import ArchConfig

MAGIC = b"CLC1"
VERSION = 1
FLAG_PQF = 1
FLAG_RAW_COEFFS = 2

WEIGHTS_MAGIC = b"CLW1"
WEIGHTS_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class Container:
    orig_h: int
    orig_w: int
    padded_h: int
    padded_w: int
    config_digest: str
    coeff_codes: np.ndarray | None  # (channels, n) uint8 codes, or None
    raw_coeffs: np.ndarray | None   # (channels, n) float32, exclusive with codes
    z_stream: bytes
    group_streams: list[bytes] = field(default_factory=list)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError(f"truncated stream while reading {what}", offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))


def pack_codes(codes: np.ndarray) -> bytes:
    """Pack 4-bit codes two per byte, channel-major, low nibble first."""
    flat = codes.reshape(-1).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return ((flat[0::2] & 0xF) | (flat[1::2] << 4)).tobytes()


def unpack_codes(raw: bytes, channels: int, n: int) -> np.ndarray:
    packed = np.frombuffer(raw, dtype=np.uint8)
    flat = np.empty(packed.size * 2, dtype=np.uint8)
    flat[0::2] = packed & 0xF
    flat[1::2] = packed >> 4
    return flat[:channels * n].reshape(channels, n)


def write_container(c: Container) -> bytes:
    payload = bytearray()
    payload += struct.pack("<IIII", c.orig_h, c.orig_w, c.padded_h, c.padded_w)
    payload += bytes.fromhex(c.config_digest)
    flags = 0
    if c.coeff_codes is not None or c.raw_coeffs is not None:
        flags |= FLAG_PQF
    if c.raw_coeffs is not None:
        flags |= FLAG_RAW_COEFFS
    payload += struct.pack("<B", flags)
    if flags & FLAG_PQF:
        coeffs = c.raw_coeffs if c.raw_coeffs is not None else c.coeff_codes
        channels, n = coeffs.shape
        payload += struct.pack("<BH", n, channels)
        if flags & FLAG_RAW_COEFFS:
            payload += c.raw_coeffs.astype("<f4").tobytes()
        else:
            payload += pack_codes(c.coeff_codes)
    payload += struct.pack("<I", len(c.z_stream)) + c.z_stream
    payload += struct.pack("<B", len(c.group_streams))
    for s in c.group_streams:
        payload += struct.pack("<I", len(s)) + s
    header = MAGIC + struct.pack("<HI", VERSION, zlib.crc32(payload))
    return header + bytes(payload)


def read_container(data: bytes) -> Container:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise DecodeError("bad magic; not a compressed-image container", offset=0)
    (version,) = r.unpack("H", "version")
    if version != VERSION:
        raise DecodeError(f"unsupported container version {version}", offset=4)
    (crc,) = r.unpack("I", "checksum")
    payload = data[r.pos:]
    if zlib.crc32(payload) != crc:
        raise DecodeError("payload checksum mismatch; stream is corrupted", offset=r.pos)
    orig_h, orig_w, padded_h, padded_w = r.unpack("IIII", "image dimensions")
    if orig_h < 2 or orig_w < 2 or orig_h > 1 << 24 or orig_w > 1 << 24:
        raise DecodeError(f"implausible image dimensions {orig_h}x{orig_w}", offset=10)
    if padded_h < orig_h or padded_w < orig_w or padded_h % 16 or padded_w % 16 \
            or padded_h - orig_h >= 16 or padded_w - orig_w >= 16:
        raise DecodeError(f"inconsistent padded dimensions {padded_h}x{padded_w} "
                          f"for image {orig_h}x{orig_w}", offset=18)
    digest = r.take(8, "config digest").hex()
    (flags,) = r.unpack("B", "flags")
    if flags & ~(FLAG_PQF | FLAG_RAW_COEFFS):
        raise DecodeError(f"unknown flag bits 0x{flags:02x}", offset=r.pos - 1)
    coeff_codes = raw_coeffs = None
    if flags & FLAG_PQF:
        n, channels = r.unpack("BH", "coefficient block header")
        if n == 0 or channels == 0:
            raise DecodeError("empty coefficient block", offset=r.pos - 3)
        if flags & FLAG_RAW_COEFFS:
            raw = r.take(channels * n * 4, "raw coefficients")
            raw_coeffs = np.frombuffer(raw, dtype="<f4").reshape(channels, n).copy()
        else:
            nbytes = (channels * n + 1) // 2
            coeff_codes = unpack_codes(r.take(nbytes, "coefficient codes"), channels, n)
    (z_len,) = r.unpack("I", "hyper stream length")
    z_stream = r.take(z_len, "hyper stream")
    (n_groups,) = r.unpack("B", "group count")
    groups = []
    for g in range(n_groups):
        (glen,) = r.unpack("I", f"group {g} length")
        groups.append(r.take(glen, f"group {g} stream"))
    if r.pos != len(data):
        raise DecodeError(f"{len(data) - r.pos} trailing bytes after container", offset=r.pos)
    return Container(orig_h, orig_w, padded_h, padded_w, digest,
                     coeff_codes, raw_coeffs, z_stream, groups)


# ---------------------------------------------------------------------------
# Weights file
# ---------------------------------------------------------------------------

def save_weights(path: str, config: ArchConfig, tensors: dict[str, np.ndarray]) -> None:
    """Versioned named-tensor table with a trailing sha256 checksum."""
    out = bytearray()
    out += WEIGHTS_MAGIC + struct.pack("<H", WEIGHTS_VERSION)
    cfg_json = json.dumps(config.to_dict(), sort_keys=True).encode()
    out += struct.pack("<I", len(cfg_json)) + cfg_json
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode()
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += hashlib.sha256(out).digest()
    with open(path, "wb") as fh:
        fh.write(out)


def load_weights(path: str) -> tuple[ArchConfig, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise WeightsError(f"{path}: {exc}") from exc
    if len(data) < 38 or data[:4] != WEIGHTS_MAGIC:
        raise WeightsError(f"{path}: not a weights file")
    body, checksum = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise WeightsError(f"{path}: checksum mismatch; file is corrupted")
    pos = 4
    (version,) = struct.unpack_from("<H", data, pos); pos += 2
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"{path}: unsupported weights version {version}")
    (jlen,) = struct.unpack_from("<I", data, pos); pos += 4
    try:
        config = ArchConfig.from_dict(json.loads(data[pos:pos + jlen]))
    except (ValueError, TypeError) as exc:
        raise WeightsError(f"{path}: bad architecture config: {exc}") from exc
    pos += jlen
    (count,) = struct.unpack_from("<I", data, pos); pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos); pos += 2
        name = data[pos:pos + nlen].decode(); pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos); pos += 2
        if code not in _DTYPES:
            raise WeightsError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos); pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(body):
            raise WeightsError(f"{path}: truncated tensor data for {name}")
        tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(shape).copy()
        pos += nbytes
    return config, tensors
