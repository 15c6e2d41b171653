"""Dense-tensor substrate: primitive layers with hand-derived backward passes.

Values are dense row-major numpy arrays in float32 (reference width) or
float64 (used by all gradient checks). Every operation here returns
``(out, backward)`` where ``backward`` maps the upstream gradient to input
gradients and accumulates parameter gradients in place. There is no
autodiff graph; composite modules chain these closures explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DimensionError, ConfigError

F32 = np.float32
F64 = np.float64

#: dtype codes used by the checkpoint/trace container (see container.py).
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("u1")}


def assert_finite(x: np.ndarray, where: str) -> None:
    """Raise if ``x`` contains NaN/Inf; non-finite values are an error state."""
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x).ravel())[0])
        raise FloatingPointError(f"non-finite value in {where} at flat index {bad}")


class Parameter:
    """A named, learnable array with an optional gradient accumulator."""

    def __init__(self, name: str, value: np.ndarray, learnable: bool = True):
        self.name = name
        value = np.asarray(value)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.value = value if value.ndim == 0 else np.ascontiguousarray(value)
        self.grad: np.ndarray | None = None
        self.learnable = learnable

    @property
    def shape(self):
        return self.value.shape

    @property
    def numel(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {self.value.shape} for {self.name}"
            )
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Parameter({self.name!r}, shape={self.value.shape}, learnable={self.learnable})"


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=F32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std, sampled via inverse CDF.

    One uniform draw per element, so the result is a pure function of the
    generator state (no rejection loop).
    """
    lo = 0.5 * (1.0 + math.erf(-2.0 / math.sqrt(2.0)))
    hi = 0.5 * (1.0 + math.erf(2.0 / math.sqrt(2.0)))
    u = rng.uniform(lo, hi, size=shape)
    return (std * math.sqrt(2.0) * special.erfinv(2.0 * u - 1.0)).astype(dtype)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, w: Parameter, bias: Parameter | None = None):
    """y[..., j] = sum_k x[..., k] * w[j, k] (+ bias[j]).

    ``x`` may carry arbitrary leading dimensions; ``w`` has shape (out, in).
    """
    if x.shape[-1] != w.value.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight width {w.value.shape[1]}")
    y = x @ w.value.T
    if bias is not None:
        y = y + bias.value

    def backward(dy: np.ndarray) -> np.ndarray:
        dx = dy @ w.value
        w.add_grad(dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1]))
        if bias is not None:
            bias.add_grad(dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dx

    return y, backward


def gelu(x: np.ndarray):
    """Exact (erf-based) GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + special.erf(x * inv_sqrt2))
    y = x * cdf

    def backward(dy: np.ndarray) -> np.ndarray:
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return dy * (cdf + x * pdf)

    return y.astype(x.dtype, copy=False), backward


def identity_act(x: np.ndarray):
    """Pass-through activation (test hook for composition identities)."""
    return x, lambda dy: dy


ACTIVATIONS = {"gelu": gelu, "identity": identity_act}


@dataclass
class Mlp2Params:
    """Two-layer perceptron parameters: linear -> activation -> linear."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter
    act: str = "gelu"

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


def mlp2(x: np.ndarray, p: Mlp2Params):
    if p.act not in ACTIVATIONS:
        raise ConfigError(f"unknown activation tag {p.act!r}")
    h, back1 = linear(x, p.w1, p.b1)
    a, back_act = ACTIVATIONS[p.act](h)
    y, back2 = linear(a, p.w2, p.b2)

    def backward(dy: np.ndarray) -> np.ndarray:
        return back1(back_act(back2(dy)))

    return y, backward


def sigmoid(x: np.ndarray):
    # Stable in both tails: exp of a non-positive argument only.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)

    def backward(dy: np.ndarray) -> np.ndarray:
        return dy * y * (1.0 - y)

    return y, backward


def softmax(x: np.ndarray):
    """Softmax along the last axis, max-subtracted for stability."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    y = y.astype(x.dtype, copy=False)

    def backward(dy: np.ndarray) -> np.ndarray:
        inner = (dy * y).sum(axis=-1, keepdims=True)
        return y * (dy - inner)

    return y, backward


def dwconv2d(x: np.ndarray, kernel: Parameter):
    """Depth-wise 2D convolution, zero padding, output spatial size preserved.

    ``x`` is (..., H, W, C) with an optional batch dimension in front;
    ``kernel`` is (k, k, C) with odd k. Channels never mix.
    """
    k = kernel.value.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"dwconv2d kernel size must be odd, got {k}")
    if kernel.value.shape[0] != kernel.value.shape[1]:
        raise ConfigError("dwconv2d kernel must be square")
    if x.shape[-1] != kernel.value.shape[2]:
        raise DimensionError(f"dwconv2d: channels {x.shape[-1]} != kernel channels {kernel.value.shape[2]}")
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    b, h, w_, c = xb.shape
    pad = k // 2
    xp = np.zeros((b, h + 2 * pad, w_ + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w_, :] = xb
    y = np.zeros_like(xb)
    for u in range(k):
        for v in range(k):
            y += xp[:, u:u + h, v:v + w_, :] * kernel.value[u, v]

    def backward(dy: np.ndarray) -> np.ndarray:
        dyb = dy[None] if squeeze else dy
        dk = np.empty_like(kernel.value)
        dxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                dk[u, v] = (dyb * xp[:, u:u + h, v:v + w_, :]).sum(axis=(0, 1, 2))
                dxp[:, u:u + h, v:v + w_, :] += dyb * kernel.value[u, v]
        kernel.add_grad(dk)
        dx = dxp[:, pad:pad + h, pad:pad + w_, :]
        return dx[0] if squeeze else dx

    return (y[0] if squeeze else y), backward


def _pool_windows(size_in: int, size_out: int):
    """Floor-based tiling: window i covers [i*H//h, (i+1)*H//h)."""
    return [(i * size_in // size_out, (i + 1) * size_in // size_out) for i in range(size_out)]


def adaptive_avg_pool2d(x: np.ndarray, h: int, w: int):
    """Mean-pool (..., H, W, C) onto an h x w grid whose windows tile the input."""
    squeeze = x.ndim == 3
    xb = x[None] if squeeze else x
    b, hh, ww, c = xb.shape
    if not (1 <= h <= hh and 1 <= w <= ww):
        raise DimensionError(f"adaptive_avg_pool2d: target ({h},{w}) exceeds source ({hh},{ww})")
    rows = _pool_windows(hh, h)
    cols = _pool_windows(ww, w)
    y = np.empty((b, h, w, c), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            y[:, i, j] = xb[:, r0:r1, c0:c1].mean(axis=(1, 2))

    def backward(dy: np.ndarray) -> np.ndarray:
        dyb = dy[None] if squeeze else dy
        dx = np.zeros_like(xb)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                dx[:, r0:r1, c0:c1] += dyb[:, i:i + 1, j:j + 1] / area
        return dx[0] if squeeze else dx

    return (y[0] if squeeze else y), backward


def cosine_sim(a: np.ndarray, b: np.ndarray, eps: float = 1e-6):
    """Pairwise cosine similarity between row sets.

    ``a`` is (..., m, d) and ``b`` is (..., n, d); the result is (..., m, n).
    Norms are floored at ``eps``; the floor is a stop-gradient region.
    """
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_sim: feature widths differ ({a.shape[-1]} vs {b.shape[-1]})")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    mask_a = na > eps
    mask_b = nb > eps
    na = np.maximum(na, eps)
    nb = np.maximum(nb, eps)
    ah = a / na
    bh = b / nb
    out = ah @ np.swapaxes(bh, -1, -2)

    def backward(dout: np.ndarray):
        # d/da_i out_ij = bh_j / na_i - out_ij * ah_i / na_i  (unclamped norm)
        da = (dout @ bh - mask_a * np.sum(dout * out, axis=-1, keepdims=True) * ah) / na
        dt = np.swapaxes(dout, -1, -2)
        db = (dt @ ah - mask_b * np.sum(dt * np.swapaxes(out, -1, -2), axis=-1, keepdims=True) * bh) / nb
        return da.astype(a.dtype, copy=False), db.astype(b.dtype, copy=False)

    return out.astype(a.dtype, copy=False), backward


def layer_norm(x: np.ndarray, gamma: Parameter, beta: Parameter, eps: float = 1e-5):
    """Channel LayerNorm: per-position mean/variance over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    s = np.sqrt(var + eps)
    xh = xc / s
    y = xh * gamma.value + beta.value

    def backward(dy: np.ndarray) -> np.ndarray:
        d = x.shape[-1]
        gamma.add_grad((dy * xh).reshape(-1, d).sum(axis=0))
        beta.add_grad(dy.reshape(-1, d).sum(axis=0))
        gdy = dy * gamma.value
        m1 = gdy.mean(axis=-1, keepdims=True)
        m2 = (gdy * xh).mean(axis=-1, keepdims=True)
        return (gdy - m1 - xh * m2) / s

    return y.astype(x.dtype, copy=False), backward


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_err: float
    max_abs_err: float
    worst: tuple[int, int]  # (input index, flat coordinate)
    passed: bool
    failure: str | None = None
    per_input: list[float] = field(default_factory=list)

    def __str__(self):
        status = "ok" if self.passed else f"FAIL ({self.failure or 'tolerance exceeded'})"
        return f"max rel err {self.max_rel_err:.3e} at input {self.worst[0]}[{self.worst[1]}]: {status}"


def grad_check(f, inputs: list[np.ndarray], step: float = 1e-5, tol: float = 1e-7) -> GradCheckReport:
    """Check analytic gradients of a scalar-valued closure by central differences.

    ``f(inputs) -> (loss, grads)`` must return the scalar loss and one
    gradient array per input, computed analytically. All arrays must be
    float64. Relative error uses a 1e-6 floor on the denominator so that
    exactly-zero gradients compare by absolute difference.
    """
    for i, x in enumerate(inputs):
        if x.dtype != F64:
            raise ConfigError(f"grad_check requires float64 inputs; input {i} is {x.dtype}")
    loss0, grads = f(inputs)
    if not np.isfinite(loss0):
        return GradCheckReport(math.inf, math.inf, (-1, -1), False, failure="non-finite loss")
    max_rel = 0.0
    max_abs = 0.0
    worst = (0, 0)
    per_input = []
    for i, x in enumerate(inputs):
        g = grads[i]
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g).ravel())[0])
            return GradCheckReport(math.inf, math.inf, (i, bad), False,
                                   failure=f"non-finite analytic gradient at input {i}[{bad}]")
        rel_i = 0.0
        flat = x.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _ = f(inputs)
            flat[j] = orig - step
            lm, _ = f(inputs)
            flat[j] = orig
            fd = (lp - lm) / (2.0 * step)
            if not (np.isfinite(lp) and np.isfinite(lm)):
                return GradCheckReport(math.inf, math.inf, (i, j), False,
                                       failure=f"non-finite loss while perturbing input {i}[{j}]")
            an = g.ravel()[j]
            abs_err = abs(an - fd)
            rel = abs_err / max(abs(an), abs(fd), 1e-6)
            if rel > max_rel:
                max_rel, worst = rel, (i, j)
            max_abs = max(max_abs, abs_err)
            rel_i = max(rel_i, rel)
        per_input.append(rel_i)
    return GradCheckReport(max_rel, max_abs, worst, max_rel <= tol, per_input=per_input)
