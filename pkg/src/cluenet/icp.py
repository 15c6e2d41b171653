"""Cluster pooling: 2x downsampling by averaging similarity-space clusters.

Each pixel is projected into a similarity space, seeds are grid-pooled to
the target resolution, and every pixel joins its most cosine-similar seed.
The pooled output is the per-cluster mean of the member *similarity*
vectors pushed through a small perceptron, so the similarity projection
sits on the differentiable path and learns.

``fec_pool_oracle`` reproduces the broken wiring this design fixes: the
same partition, but the pooled means are taken over the raw (normalized)
features, so the similarity projection only ever picks indices and its
gradient is identically zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


@dataclass
class PoolAssignment:
    """Hard partition produced by one pooling step.

    ``owner[..., i]`` is the cluster index of flat pixel i; clusters are the
    flat positions of the (H/2, W/2) output grid (or the identity partition
    for resolution-preserving transitions).
    """

    owner: np.ndarray            # (..., n) int32
    m: int                       # cluster count
    grid_hw: tuple[int, int]     # output grid the clusters live on

    def members(self, batch: int = 0) -> list[np.ndarray]:
        """Pixel index lists per cluster; together they partition [0, n)."""
        owner = self.owner[batch] if self.owner.ndim == 2 else self.owner
        order = np.argsort(owner, kind="stable")
        bounds = np.searchsorted(owner[order], np.arange(self.m + 1))
        return [order[bounds[c]:bounds[c + 1]] for c in range(self.m)]


@dataclass
class IcpParams:
    """Transition parameters: similarity projection plus output perceptron.

    ``proj_v`` is a stack of 1-3 linear layers with GELU between them; depth
    2 is the default, 1 and 3 are config variants.
    """

    norm_g: T.Parameter
    norm_b: T.Parameter
    proj_f: T.Parameter                       # (d_s, d_in), no bias
    proj_v: list[tuple[T.Parameter, T.Parameter]]
    d_in: int
    d_out: int

    def params(self) -> list[T.Parameter]:
        out = [self.norm_g, self.norm_b, self.proj_f]
        for w, b in self.proj_v:
            out.extend([w, b])
        return out


def make_icp_params(rng: np.random.Generator, d_in: int, d_out: int,
                    depth: int = 2, dtype=T.F32, name: str = "trans") -> IcpParams:
    if depth not in (1, 2, 3):
        raise ConfigError(f"{name}: proj_v depth must be 1, 2 or 3, got {depth}")
    layers = []
    width_in = d_in
    for i in range(depth):
        w = T.Parameter(f"{name}.proj_v{i + 1}.w",
                        T.trunc_normal(rng, (d_out, width_in), 0.02, dtype))
        b = T.Parameter(f"{name}.proj_v{i + 1}.b", np.zeros(d_out, dtype=dtype))
        layers.append((w, b))
        width_in = d_out
    return IcpParams(
        norm_g=T.Parameter(f"{name}.norm_g", np.ones(d_in, dtype=dtype)),
        norm_b=T.Parameter(f"{name}.norm_b", np.zeros(d_in, dtype=dtype)),
        proj_f=T.Parameter(f"{name}.proj_f", T.trunc_normal(rng, (d_in, d_in), 0.02, dtype)),
        proj_v=layers, d_in=d_in, d_out=d_out)


def _proj_v_forward(x: np.ndarray, layers: list[tuple[T.Parameter, T.Parameter]]):
    backs = []
    h = x
    for i, (w, b) in enumerate(layers):
        h, back_lin = T.linear(h, w, b)
        backs.append(back_lin)
        if i + 1 < len(layers):
            h, back_act = T.gelu(h)
            backs.append(back_act)

    def backward(dy: np.ndarray) -> np.ndarray:
        for back in reversed(backs):
            dy = back(dy)
        return dy

    return h, backward


def _partition(s_flat: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Argmax cosine similarity of each pixel over all seeds; ties take the
    lowest seed index. The comparison itself is non-differentiable and is
    treated as constant by every backward pass here."""
    sim, _ = T.cosine_sim(s_flat, seeds)
    return np.argmax(sim, axis=-1).astype(np.int32)


def _pool_means(vectors: np.ndarray, owner: np.ndarray, seeds: np.ndarray):
    """Per-cluster mean of member vectors; empty clusters keep their seed.

    vectors/seeds are (B, n, c) and (B, m, c); owner is (B, n). Returns
    (pooled, counts, backward) where backward(d_pooled) -> (d_vectors,
    d_seeds)."""
    bsz, n, c = vectors.shape
    m = seeds.shape[1]
    offsets = (np.arange(bsz) * m)[:, None]
    rows = (owner + offsets).ravel()
    sums = np.zeros((bsz * m, c), dtype=vectors.dtype)
    np.add.at(sums, rows, vectors.reshape(-1, c))
    counts = np.bincount(rows, minlength=bsz * m).reshape(bsz, m)
    sums = sums.reshape(bsz, m, c)
    empty = counts == 0
    denom = np.maximum(counts, 1)[..., None]
    pooled = np.where(empty[..., None], seeds, sums / denom)

    def backward(d_pooled: np.ndarray):
        d_members = np.where(empty[..., None], 0.0, d_pooled / denom)
        d_vectors = np.take_along_axis(
            d_members.reshape(bsz, m, c), owner[..., None].astype(np.intp), axis=1)
        d_seeds = np.where(empty[..., None], d_pooled, 0.0)
        return d_vectors, d_seeds

    return pooled, counts, backward


def _prepare(x: np.ndarray, p: IcpParams):
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    bsz, hh, ww, d = xb.shape
    if d != p.d_in:
        raise DimensionError(f"pool expects width {p.d_in}, got {d}")
    if hh % 2 or ww % 2:
        raise ConfigError(f"pool requires even extents, got ({hh},{ww})")
    return squeeze, xb, bsz, hh, ww


def icp_forward(x: np.ndarray, p: IcpParams):
    """Pool (B, H, W, d_in) to (B, H/2, W/2, d_out).

    Returns (out, PoolAssignment, backward); backward(d_out) -> dx. The
    partition is constant in backward; gradients flow through the cluster
    means and both projections.
    """
    squeeze, xb, bsz, hh, ww = _prepare(x, p)
    h2, w2 = hh // 2, ww // 2
    m = h2 * w2
    n = hh * ww

    xn, back_norm = T.layer_norm(xb, p.norm_g, p.norm_b)
    s_map, back_projf = T.linear(xn, p.proj_f)               # (B,H,W,d_s)
    seeds_map, back_seed_pool = T.adaptive_avg_pool2d(s_map, h2, w2)
    seeds = seeds_map.reshape(bsz, m, p.d_in)
    s_flat = s_map.reshape(bsz, n, p.d_in)
    owner = _partition(s_flat, seeds)
    pooled, _, back_means = _pool_means(s_flat, owner, seeds)
    out_flat, back_projv = _proj_v_forward(pooled, p.proj_v)
    out = out_flat.reshape(bsz, h2, w2, p.d_out)
    assign = PoolAssignment(owner=owner[0] if squeeze else owner, m=m, grid_hw=(h2, w2))

    def backward(d_out: np.ndarray) -> np.ndarray:
        d_out_b = d_out[None] if squeeze else d_out
        d_pooled = back_projv(d_out_b.reshape(bsz, m, p.d_out))
        d_s_flat, d_seeds = back_means(d_pooled)
        d_s_map = d_s_flat.reshape(s_map.shape) + back_seed_pool(d_seeds.reshape(seeds_map.shape))
        dx = back_norm(back_projf(d_s_map))
        return dx[0] if squeeze else dx

    return (out[0] if squeeze else out), assign, backward


def fec_pool_oracle(x: np.ndarray, p: IcpParams):
    """The pathological wiring: partition from proj_f, content from elsewhere.

    Identical partition to icp_forward, but pooled means are taken over the
    normalized input features (and empty clusters over feature-space seeds),
    so proj_f contributes only argmax indices and receives zero gradient.
    """
    squeeze, xb, bsz, hh, ww = _prepare(x, p)
    h2, w2 = hh // 2, ww // 2
    m = h2 * w2
    n = hh * ww

    xn, back_norm = T.layer_norm(xb, p.norm_g, p.norm_b)
    s_map, _ = T.linear(xn, p.proj_f)                        # index path only
    seeds_map, _ = T.adaptive_avg_pool2d(s_map, h2, w2)
    owner = _partition(s_map.reshape(bsz, n, p.d_in), seeds_map.reshape(bsz, m, p.d_in))

    raw_seeds_map, back_raw_pool = T.adaptive_avg_pool2d(xn, h2, w2)
    raw_seeds = raw_seeds_map.reshape(bsz, m, p.d_in)
    x_flat = xn.reshape(bsz, n, p.d_in)
    pooled, _, back_means = _pool_means(x_flat, owner, raw_seeds)
    out_flat, back_projv = _proj_v_forward(pooled, p.proj_v)
    out = out_flat.reshape(bsz, h2, w2, p.d_out)
    assign = PoolAssignment(owner=owner[0] if squeeze else owner, m=m, grid_hw=(h2, w2))

    def backward(d_out: np.ndarray) -> np.ndarray:
        d_out_b = d_out[None] if squeeze else d_out
        d_pooled = back_projv(d_out_b.reshape(bsz, m, p.d_out))
        d_x_flat, d_raw_seeds = back_means(d_pooled)
        d_xn = d_x_flat.reshape(xn.shape) + back_raw_pool(d_raw_seeds.reshape(raw_seeds_map.shape))
        dx = back_norm(d_xn)
        return dx[0] if squeeze else dx

    return (out[0] if squeeze else out), assign, backward


# ---------------------------------------------------------------------------
# resolution-preserving transition (small inputs)
# ---------------------------------------------------------------------------

@dataclass
class LinearTransitionParams:
    """Channel-only stage transition: norm then a per-pixel projection.

    Used as the first transition when the stage-1 map is already too small
    to halve three times; records an identity partition so receptive-field
    composition stays uniform.
    """

    norm_g: T.Parameter
    norm_b: T.Parameter
    w: T.Parameter
    b: T.Parameter
    d_in: int
    d_out: int

    def params(self) -> list[T.Parameter]:
        return [self.norm_g, self.norm_b, self.w, self.b]


def make_linear_transition(rng: np.random.Generator, d_in: int, d_out: int,
                           dtype=T.F32, name: str = "trans") -> LinearTransitionParams:
    return LinearTransitionParams(
        norm_g=T.Parameter(f"{name}.norm_g", np.ones(d_in, dtype=dtype)),
        norm_b=T.Parameter(f"{name}.norm_b", np.zeros(d_in, dtype=dtype)),
        w=T.Parameter(f"{name}.w", T.trunc_normal(rng, (d_out, d_in), 0.02, dtype)),
        b=T.Parameter(f"{name}.b", np.zeros(d_out, dtype=dtype)),
        d_in=d_in, d_out=d_out)


def linear_transition_forward(x: np.ndarray, p: LinearTransitionParams):
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    bsz, hh, ww, d = xb.shape
    if d != p.d_in:
        raise DimensionError(f"transition expects width {p.d_in}, got {d}")
    xn, back_norm = T.layer_norm(xb, p.norm_g, p.norm_b)
    out, back_lin = T.linear(xn, p.w, p.b)
    n = hh * ww
    owner = np.tile(np.arange(n, dtype=np.int32), (bsz, 1))
    assign = PoolAssignment(owner=owner[0] if squeeze else owner, m=n, grid_hw=(hh, ww))

    def backward(d_out: np.ndarray) -> np.ndarray:
        d_out_b = d_out[None] if squeeze else d_out
        dx = back_norm(back_lin(d_out_b))
        return dx[0] if squeeze else dx

    return (out[0] if squeeze else out), assign, backward
