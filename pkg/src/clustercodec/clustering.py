"""Contextual-clustering token mixer.

Positions of a (C, H, W) grid are grouped into c clusters by cosine similarity
to pooled-and-offset centers, aggregated with similarity-sigmoid weights, and
dispatched back additively. Even-numbered blocks run a checkerboard variant
where the two coordinate-parity halves are mixed separately with the other
half zeroed out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from .engine import Module, Tensor
from .layers import Linear, Mlp

ZERO_NORM_EPS = 1e-12
_NORM_GUARD = ZERO_NORM_EPS ** 2  # inside sqrt: zero vectors map to similarity 0


@dataclass
class ClusterAssignment:
    """Hard cluster labels plus each position's similarity to its own center.

    label is -1 at masked-out positions; member_count sums to the number of
    active positions (non-overlapped clustering).
    """

    label: np.ndarray       # (H, W) int
    similarity: np.ndarray  # (H, W) float
    member_count: np.ndarray  # (c,) int


class ClusterParams(Module):
    def __init__(self, rng: np.random.Generator, channels: int, grid=(2, 2),
                 dtype=np.float32, scalar_gamma: bool = False):
        gh, gw = grid
        self.grid = (gh, gw)
        self.c = gh * gw
        gamma_shape = () if scalar_gamma else (channels,)
        self.gamma = eg.parameter(np.ones(gamma_shape), dtype=dtype)
        self.alpha = eg.parameter(1.0, dtype=dtype)
        self.beta = eg.parameter(0.0, dtype=dtype)
        self.point_transform = Linear(rng, channels, channels, dtype)
        self.value_transform = Linear(rng, channels, channels, dtype)
        self.offset_mlp = Mlp(rng, channels, channels, channels, dtype)
        self.value_offset_mlp = Mlp(rng, channels, channels, channels, dtype)
        self.dispatch_linear = Linear(rng, channels, channels, dtype)


def add_global_context(x: Tensor, gamma: Tensor) -> Tensor:
    """P_i + gamma * mean over all points."""
    m = eg.mean(x, axis=(1, 2), keepdims=True)
    g = gamma if gamma.data.ndim == 0 else eg.reshape(gamma, (-1, 1, 1))
    return eg.add(x, eg.mul(g, m))


def compute_centers(x: Tensor, grid: tuple[int, int], offset_mlp: Mlp | None) -> Tensor:
    """Pooled grid means plus a learned per-center offset; returns (c, C)."""
    gh, gw = grid
    c_ch, h, w = x.data.shape
    # tiny grids simply get fewer clusters
    gh, gw = min(gh, h), min(gw, w)
    pooled = eg.avg_pool_to(x, gh, gw)
    centers = eg.transpose(eg.reshape(pooled, (c_ch, gh * gw)), (1, 0))
    if offset_mlp is not None:
        centers = eg.add(centers, offset_mlp(centers))
    return centers


def _row_normalize(v: Tensor) -> Tensor:
    ss = eg.sum_(eg.square(v), axis=-1, keepdims=True)
    return eg.div(v, eg.sqrt(eg.add(ss, eg.constant(_NORM_GUARD, dtype=v.data.dtype))))


def cosine_similarities(points_2d: Tensor, centers: Tensor) -> Tensor:
    """(n, C) x (c, C) -> (c, n) cosine similarity; zero-norm vectors give 0."""
    return eg.matmul(_row_normalize(centers), eg.transpose(_row_normalize(points_2d), (1, 0)))


def assign(points, centers, mask: np.ndarray | None = None) -> ClusterAssignment:
    """Hard argmax assignment on raw values; ties break to the lowest center."""
    pd = points.data if isinstance(points, Tensor) else np.asarray(points)
    cd = centers.data if isinstance(centers, Tensor) else np.asarray(centers)
    ch, h, w = pd.shape
    c = cd.shape[0]
    p2 = pd.reshape(ch, h * w).T
    pn = np.linalg.norm(p2, axis=1)
    cn = np.linalg.norm(cd, axis=1)
    safe_p = np.where(pn < ZERO_NORM_EPS, 1.0, pn)
    safe_c = np.where(cn < ZERO_NORM_EPS, 1.0, cn)
    sims = (p2 / safe_p[:, None]) @ (cd / safe_c[:, None]).T  # (n, c)
    sims[pn < ZERO_NORM_EPS, :] = 0.0
    sims[:, cn < ZERO_NORM_EPS] = 0.0
    labels = sims.argmax(axis=1)
    own = sims[np.arange(h * w), labels]
    active = np.ones(h * w, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(h * w)
    labels = np.where(active, labels, -1)
    own = np.where(active, own, 0.0)
    member_count = np.bincount(labels[active], minlength=c)
    return ClusterAssignment(labels.reshape(h, w), own.reshape(h, w), member_count)


def _membership(assignment: ClusterAssignment, c: int) -> np.ndarray:
    """One-hot membership matrix (c, n); zero columns at masked positions."""
    labels = assignment.label.reshape(-1)
    b = np.zeros((c, labels.size))
    active = labels >= 0
    b[labels[active], np.nonzero(active)[0]] = 1.0
    return b


def _aggregate(weights: Tensor, values_2d: Tensor, value_centers: Tensor, member: np.ndarray) -> Tensor:
    """F_k = (c_v_k + sum_i w_i v_i) / (1 + m_k) with the fixed 1+m denominator."""
    m = member.sum(axis=1)
    bmat = eg.constant(member, dtype=values_2d.data.dtype)
    wv = eg.mul(values_2d, eg.reshape(weights, (-1, 1)))
    f_sum = eg.matmul(bmat, wv)
    inv = eg.constant((1.0 / (1.0 + m))[:, None], dtype=values_2d.data.dtype)
    return eg.mul(eg.add(value_centers, f_sum), inv)


def aggregate(values, value_centers: Tensor, assignment: ClusterAssignment,
              alpha, beta) -> Tensor:
    """Per-cluster feature F of shape (c, C) from a hard assignment."""
    v = values if isinstance(values, Tensor) else eg.constant(values)
    ch = v.data.shape[0]
    n = v.data.shape[1] * v.data.shape[2]
    v2 = eg.transpose(eg.reshape(v, (ch, n)), (1, 0))
    sims = eg.constant(assignment.similarity.reshape(n), dtype=v.data.dtype)
    w = eg.sigmoid(eg.add(eg.mul(eg.as_tensor(alpha), sims), eg.as_tensor(beta)))
    c = value_centers.data.shape[0]
    return _aggregate(w, v2, value_centers, _membership(assignment, c))


def dispatch(points, f: Tensor, assignment: ClusterAssignment, dispatch_linear: Linear) -> Tensor:
    """P_i + Linear(s_i * F_label(i)) at active positions; others unchanged."""
    p = points if isinstance(points, Tensor) else eg.constant(points)
    ch, h, w = p.data.shape
    n = h * w
    c = f.data.shape[0]
    member = _membership(assignment, c)
    p2 = eg.transpose(eg.reshape(p, (ch, n)), (1, 0))
    sims = eg.constant(assignment.similarity.reshape(n, 1), dtype=p.data.dtype)
    gathered = eg.matmul(eg.constant(member.T, dtype=p.data.dtype), f)
    update = dispatch_linear(eg.mul(sims, gathered))
    active = eg.constant((assignment.label.reshape(n, 1) >= 0).astype(p.data.dtype))
    out2 = eg.add(p2, eg.mul(active, update))
    return eg.reshape(eg.transpose(out2, (1, 0)), (ch, h, w))


def _mix_masked(x: Tensor, params: ClusterParams, active: np.ndarray | None) -> Tensor:
    """Steps 1-5 on one (possibly masked) grid; gradients flow through the
    similarities while the argmax labels stay fixed."""
    ch, h, w = x.data.shape
    n = h * w
    x1 = add_global_context(x, params.gamma)
    p1 = params.point_transform(x1)
    centers = compute_centers(p1, params.grid, params.offset_mlp)
    values = params.value_transform(x1)
    value_centers = compute_centers(values, params.grid, params.value_offset_mlp)

    assignment = assign(p1, centers, mask=active)
    member = _membership(assignment, params.c)

    p1_2d = eg.transpose(eg.reshape(p1, (ch, n)), (1, 0))
    v2 = eg.transpose(eg.reshape(values, (ch, n)), (1, 0))
    sims = cosine_similarities(p1_2d, centers)  # (c, n)
    onehot = eg.constant(member, dtype=x.data.dtype)
    own_sim = eg.sum_(eg.mul(onehot, sims), axis=0)  # (n,), 0 at inactive
    wgt = eg.sigmoid(eg.add(eg.mul(params.alpha, own_sim), params.beta))
    f = _aggregate(wgt, v2, value_centers, member)

    gathered = eg.matmul(eg.transpose(onehot, (1, 0)), f)
    update = params.dispatch_linear(eg.mul(eg.reshape(own_sim, (n, 1)), gathered))
    active_col = eg.constant(member.sum(axis=0)[:, None], dtype=x.data.dtype)
    out2 = eg.add(p1_2d, eg.mul(active_col, update))
    return eg.reshape(eg.transpose(out2, (1, 0)), (ch, h, w))


def cluster_mix(x: Tensor, params: ClusterParams, checkerboard: bool = False) -> Tensor:
    """Full token mixer; checkerboard mode splits positions by (row+col) parity,
    zeroes the opposite half for each pass, and merges the halves positionally."""
    if not checkerboard:
        return _mix_masked(x, params, None)
    _, h, w = x.data.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = None
    for parity in (0, 1):
        active = ((rr + cc) % 2) == parity
        keep = eg.constant(active[None, :, :].astype(x.data.dtype))
        half = _mix_masked(eg.mul(x, keep), params, active)
        part = eg.mul(half, keep)
        out = part if out is None else eg.add(out, part)
    return out
