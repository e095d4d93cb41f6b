"""Minimal dense-array engine with reverse-mode differentiation.

Arrays are plain numpy ndarrays wrapped in :class:`Tensor`. Feature maps use a
channel-first (C, H, W) layout throughout. Recording happens only inside a
``with Tape() as tape:`` block; outside of one, every op is a pure numpy
computation with no graph overhead.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import special as _special


class EngineError(ValueError):
    """Shape or contract violation inside the array engine."""


# ---------------------------------------------------------------------------
# Tape and Tensor
# ---------------------------------------------------------------------------

_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of executed differentiable operations.

    Single-writer: one tape per training step. Backward replays the record
    in exact reverse execution order and may run only once.
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise EngineError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, node: "Tensor") -> None:
        self._nodes.append(node)


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "is_param", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, is_param: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or is_param
        self.is_param = is_param
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, param={self.is_param})"


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), is_param=True)


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return constant(x, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _ACTIVE_TAPE.record(out)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of everything `loss` depends on, in reverse order."""
    if tape._consumed:
        raise EngineError("tape already consumed; double backward is not supported")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise EngineError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss._backward is None or loss not in tape._nodes:
        raise EngineError("loss was not produced under this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    tape._consumed = True


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, like=a)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)

    return _node(-a.data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(2.0 * a.data * g)

    return _node(a.data * a.data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        a.accumulate_grad(g * 0.5 / np.sqrt(a.data))

    return _node(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a.accumulate_grad(g * out)

    return _node(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        a.accumulate_grad(g * (1.0 - out * out))

    return _node(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = _special.expit(a.data)

    def bwd(g):
        a.accumulate_grad(g * out * (1.0 - out))

    return _node(out, (a,), bwd)


def erf(a: Tensor) -> Tensor:
    out = _special.erf(a.data)

    def bwd(g):
        a.accumulate_grad(g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data * a.data))

    return _node(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype)

    def bwd(g):
        a.accumulate_grad(g * _special.expit(x))

    return _node(out, (a,), bwd)


_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation with fixed constants (deterministic values)."""
    x = a.data
    u = _GELU_A * (x + _GELU_B * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        a.accumulate_grad(g * d)

    return _node(out.astype(x.dtype), (a,), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _node(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape) / n)

    return _node(out, (a,), bwd)


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; gradient routes to the first maximal entry."""
    out = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def bwd(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g, axis=axis)
        a.accumulate_grad(ga)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        a.accumulate_grad(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.data.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for p, s, e in zip(parts, offs[:-1], offs[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            p.accumulate_grad(g[tuple(sl)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        a.accumulate_grad(ga)

    return _node(a.data[sl].copy(), (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _node(np.matmul(a.data, b.data), (a, b), bwd)


# ---------------------------------------------------------------------------
# Structured layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-position affine map over channels of a (C, H, W) grid.

    `w` has shape (out, in); spatial dims pass through unchanged. Also accepts
    a plain (in,) vector or (n, in) matrix of channel vectors.
    """
    xd = x.data
    if w.data.ndim != 2:
        raise EngineError(f"linear weight must be 2-D, got {w.data.shape}")
    out_dim, in_dim = w.data.shape
    if xd.ndim == 3:
        if xd.shape[0] != in_dim:
            raise EngineError(f"linear: weight expects {in_dim} channels, grid has {xd.shape} ")
        c, h, wd = xd.shape
        y = (w.data @ xd.reshape(c, h * wd)).reshape(out_dim, h, wd)

        def bwd(g):
            gm = g.reshape(out_dim, h * wd)
            xm = xd.reshape(c, h * wd)
            w.accumulate_grad(gm @ xm.T)
            if b is not None:
                b.accumulate_grad(gm.sum(axis=1))
            x.accumulate_grad((w.data.T @ gm).reshape(xd.shape))

    elif xd.ndim in (1, 2):
        last = xd.shape[-1]
        if last != in_dim:
            raise EngineError(f"linear: weight expects {in_dim} features, input has {xd.shape}")
        y = xd @ w.data.T

        def bwd(g):
            gm = g.reshape(-1, out_dim)
            xm = xd.reshape(-1, in_dim)
            w.accumulate_grad(gm.T @ xm)
            if b is not None:
                b.accumulate_grad(gm.sum(axis=0))
            x.accumulate_grad((gm @ w.data).reshape(xd.shape))

    else:
        raise EngineError(f"linear: unsupported input rank {xd.ndim}")

    if b is not None:
        if b.data.shape != (out_dim,):
            raise EngineError(f"linear bias shape {b.data.shape} != ({out_dim},)")
        y = y + (b.data[:, None, None] if xd.ndim == 3 else b.data)
    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel dimension at every spatial position."""
    xd = x.data
    c = xd.shape[0]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise EngineError(f"layer_norm params must have shape ({c},)")
    mu = xd.mean(axis=0, keepdims=True)
    var = xd.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gb = gain.data.reshape(c, *([1] * (xd.ndim - 1)))
    bb = bias.data.reshape(c, *([1] * (xd.ndim - 1)))
    out = gb * xhat + bb

    def bwd(g):
        sp_axes = tuple(range(1, xd.ndim))
        gain.accumulate_grad((g * xhat).sum(axis=sp_axes))
        bias.accumulate_grad(g.sum(axis=sp_axes))
        gh = g * gb
        m1 = gh.mean(axis=0, keepdims=True)
        m2 = (gh * xhat).mean(axis=0, keepdims=True)
        x.accumulate_grad(inv * (gh - m1 - xhat * m2))

    return _node(out.astype(xd.dtype), (x, gain, bias), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + s * oh:s, j:j + s * ow:s]
    return cols.reshape(c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, s: int, p: int, oh: int, ow: int) -> np.ndarray:
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + s * oh:s, j:j + s * ow:s] += cols[:, i, j]
    return xp[:, p:p + h, p:p + w]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Standard cross-correlation on a (C, H, W) grid; kernel (O, C, kh, kw)."""
    xd = x.data
    o, ci, kh, kw = kernel.data.shape
    if ci != xd.shape[0]:
        raise EngineError(f"conv2d: kernel expects {ci} input channels, grid has {xd.shape[0]}")
    c, h, w = xd.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise EngineError(f"conv2d: output dims ({oh},{ow}) < 1 for input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    km = kernel.data.reshape(o, -1)
    y = (km @ cols).reshape(o, oh, ow)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bwd(g):
        gm = g.reshape(o, -1)
        kernel.accumulate_grad((gm @ cols.T).reshape(kernel.data.shape))
        if bias is not None:
            bias.accumulate_grad(gm.sum(axis=1))
        gx = _col2im(km.T @ gm, c, h, w, kh, kw, stride, padding, oh, ow)
        x.accumulate_grad(gx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(y, parents, bwd)


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d; kernel (C_in, O, kh, kw), output (O, (H-1)s-2p+kh, ...)."""
    xd = x.data
    ci, o, kh, kw = kernel.data.shape
    if ci != xd.shape[0]:
        raise EngineError(f"conv2d_transpose: kernel expects {ci} input channels, grid has {xd.shape[0]}")
    c, h, w = xd.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise EngineError(f"conv2d_transpose: output dims ({oh},{ow}) < 1")
    km = kernel.data.reshape(ci, -1)  # (ci, o*kh*kw)
    cols = km.T @ xd.reshape(ci, h * w)
    y = _col2im(cols, o, oh, ow, kh, kw, stride, padding, h, w)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bwd(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding)))
        gcols = _im2col(gp, kh, kw, stride, h, w)  # (o*kh*kw, h*w)
        x.accumulate_grad((km @ gcols).reshape(xd.shape))
        kernel.accumulate_grad((xd.reshape(ci, h * w) @ gcols.T).reshape(kernel.data.shape))
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(1, 2)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(y, parents, bwd)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    c, h, w = x.data.shape
    if r < 1 or h % r or w % r:
        raise EngineError(f"pixel_unshuffle: dims {h}x{w} not divisible by r={r}")
    hr, wr = h // r, w // r
    out = x.data.reshape(c, hr, r, wr, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, hr, wr)

    def bwd(g):
        gx = g.reshape(c, r, r, hr, wr).transpose(0, 3, 1, 4, 2).reshape(c, h, w)
        x.accumulate_grad(gx)

    return _node(np.ascontiguousarray(out), (x,), bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    c, h, w = x.data.shape
    if r < 1 or c % (r * r):
        raise EngineError(f"pixel_shuffle: channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out = x.data.reshape(co, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(co, h * r, w * r)

    def bwd(g):
        gx = g.reshape(co, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c, h, w)
        x.accumulate_grad(gx)

    return _node(np.ascontiguousarray(out), (x,), bwd)


def avg_pool_to(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling to an (out_h, out_w) grid of near-equal cells."""
    c, h, w = x.data.shape
    if out_h < 1 or out_w < 1:
        raise EngineError("avg_pool_to: output dims must be >= 1")
    if out_h > h or out_w > w:
        raise EngineError(f"avg_pool_to: output {out_h}x{out_w} exceeds input {h}x{w}")
    ys = [(i * h) // out_h for i in range(out_h + 1)]
    xs = [(j * w) // out_w for j in range(out_w + 1)]
    out = np.empty((c, out_h, out_w), dtype=x.data.dtype)
    for i in range(out_h):
        for j in range(out_w):
            out[:, i, j] = x.data[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(1, 2))

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(out_h):
            for j in range(out_w):
                n = (ys[i + 1] - ys[i]) * (xs[j + 1] - xs[j])
                gx[:, ys[i]:ys[i + 1], xs[j]:xs[j + 1]] += g[:, i, j][:, None, None] / n
        x.accumulate_grad(gx)

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Lightweight parameter container with recursive named traversal."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            yield from _walk_params(val, full)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def _walk_params(val, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        if val.is_param:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk_params(item, f"{name}.{i}")


def finite(t: Tensor | np.ndarray) -> bool:
    arr = t.data if isinstance(t, Tensor) else t
    return bool(np.isfinite(arr).all())
