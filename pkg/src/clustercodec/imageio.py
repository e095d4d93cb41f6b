"""Image file I/O.

The canonical interchange format is binary PPM (P6, 8-bit). PNG and other
formats are read/written through Pillow when it is installed; PPM needs no
third-party dependency.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ImageIOError


def _read_ppm(data: bytes, path: str) -> np.ndarray:
    # header: magic, width, height, maxval separated by whitespace/comments
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{path}: truncated PPM header")
        return data[start:pos]

    if token() != b"P6":
        raise ImageIOError(f"{path}: not a binary PPM (P6) file")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ImageIOError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageIOError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos:pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise ImageIOError(f"{path}: PPM raster shorter than {w}x{h} promised")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)


def read_image(path: str) -> np.ndarray:
    """Load an image as float RGB in [0, 1], shape (3, H, W)."""
    if not os.path.exists(path):
        raise ImageIOError(f"{path}: no such file")
    if path.lower().endswith((".ppm", ".pnm")):
        with open(path, "rb") as fh:
            pixels = _read_ppm(fh.read(), path)
    else:
        try:
            from PIL import Image
        except ImportError as exc:
            raise ImageIOError(f"{path}: non-PPM input needs Pillow installed") from exc
        try:
            with Image.open(path) as img:
                pixels = np.asarray(img.convert("RGB"))
        except Exception as exc:
            raise ImageIOError(f"{path}: {exc}") from exc
    return pixels.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_image(path: str, rgb: np.ndarray) -> None:
    """Write float RGB in [0, 1], shape (3, H, W), clipping out-of-range values."""
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ImageIOError(f"expected (3, H, W) array, got {rgb.shape}")
    pixels = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if path.lower().endswith((".ppm", ".pnm")):
        h, w = pixels.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(pixels.tobytes())
        return
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageIOError(f"{path}: non-PPM output needs Pillow installed") from exc
    Image.fromarray(pixels).save(path)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * float(np.log10(mse))
