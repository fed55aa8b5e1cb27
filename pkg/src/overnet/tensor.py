"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor`.  When any input requires a
gradient the result records its parents and a closure mapping the output
gradient to per-parent gradients; :func:`backward` walks that graph in
reverse topological order.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericError, UsageError

_GRAD_ENABLED = True
_KINKS: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern (ReLU masks, L1 signs) of every forward in the block.

    Two evaluations lie on the same smooth piece iff their patterns match;
    finite differences are only meaningful in that case.
    """
    global _KINKS
    prev = _KINKS
    _KINKS = []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Leaf gradients accumulate: calling this twice without resetting adds
    the two contributions.
    """
    if grad is None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = g.astype(node.dtype, copy=True)
            else:
                node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise family


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 4 and len(small) == 4 and small[2:] == (1, 1) and small[1] == big[1] and small[0] in (1, big[0]):
        return
    raise ConfigurationError(f"cannot broadcast shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; covers the scalar gate and channel scaling."""
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINKS is not None:
        _KINKS.append(mask)
    return _record(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _record(y, (x,), lambda g: (g * y * (1 - y),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError("global_avg_pool needs a non-empty spatial grid")
    shape = x.shape
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _record(out, (x,), lambda g: (np.broadcast_to(g * scale, shape).astype(g.dtype),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ConfigurationError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ConfigurationError(f"concat spatial mismatch: {xs[0].shape} vs {t.shape}")
    bounds = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=1)))


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat_channels` (used for round-trip checks)."""
    if sum(sizes) != x.shape[1]:
        raise ConfigurationError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        sl = slice(start, start + s)

        def bw(g, sl=sl):
            full = np.zeros_like(x.data)
            full[:, sl] = g
            return (full,)

        out.append(_record(np.ascontiguousarray(x.data[:, sl]), (x,), bw))
        start += s
    return out


def pixelshuffle(x: Tensor, r: int) -> Tensor:
    n, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ConfigurationError(f"pixelshuffle: {c} channels not divisible by {r}^2")
    if r == 1:
        return x
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def bw(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _record(out, (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ConfigurationError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    hs, ws = h // r, w // r
    out = x.data.reshape(n, c, hs, r, ws, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, hs, ws)

    def bw(g):
        return (g.reshape(n, c, r, r, hs, ws).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Effective weight ``g * v / ||v||`` with the norm taken per output channel."""
    vd, gd = v.data, g.data
    norm = np.sqrt(np.einsum("oijk,oijk->o", vd, vd))
    safe = np.where(norm > 0, norm, 1).astype(vd.dtype)
    u = vd / safe[:, None, None, None]
    w = gd[:, None, None, None] * u

    def bw(gw):
        dg = np.einsum("oijk,oijk->o", gw, u)
        dv = (gd / safe * (norm > 0))[:, None, None, None] * (gw - u * dg[:, None, None, None])
        return dv.astype(vd.dtype, copy=False), dg.astype(gd.dtype, copy=False)

    return _record(w, (v, g), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero "same" padding for odd square kernels."""
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (o,):
        raise ConfigurationError(f"conv2d: bias shape {bias.shape} != ({o},)")
    check_finite(x.data, "conv2d input")
    xd, wd = x.data, weight.data
    p = k // 2
    m = n * h * w

    # im2col with channel-major columns: (c*k*k, n*h*w), one GEMM each way
    xt = xd.transpose(1, 0, 2, 3)
    if k == 1:
        cols = np.ascontiguousarray(xt).reshape(c, m)
    else:
        xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xd.dtype)
        xp[:, :, p:p + h, p:p + w] = xt
        cols6 = np.empty((c, k, k, n, h, w), dtype=xd.dtype)
        for dy in range(k):
            for dx in range(k):
                cols6[:, dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
        cols = cols6.reshape(c * k * k, m)
    w2 = wd.reshape(o, c * k * k)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, h, w).transpose(1, 0, 2, 3))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, m)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = w2.T @ g2
            if k == 1:
                gxt = dcols.reshape(c, n, h, w)
            else:
                dcols = dcols.reshape(c, k, k, n, h, w)
                gxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=xd.dtype)
                for dy in range(k):
                    for dx in range(k):
                        gxp[:, :, dy:dy + h, dx:dx + w] += dcols[:, dy, dx]
                gxt = gxp[:, :, p:p + h, p:p + w]
            gx = np.ascontiguousarray(gxt.transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, lambda g: bw(g)[: len(parents)])


# ---------------------------------------------------------------------------
# fixed linear maps and reductions


def separable_map(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ x @ cols.T`` over the two spatial axes (resampling as a linear map)."""
    if rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise ConfigurationError(
            f"separable_map: maps {rows.shape}/{cols.shape} do not fit input {x.shape}"
        )
    rows = rows.astype(x.dtype, copy=False)
    cols = cols.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(rows, x.data), cols.T)
    return _record(out, (x,), lambda g: (np.matmul(np.matmul(rows.T, g), cols),))


def mean_abs_error(a: Tensor, b: Tensor) -> Tensor:
    """Mean of ``|a - b|``; the subgradient at exact ties is 0."""
    if a.shape != b.shape:
        raise ConfigurationError(f"mean_abs_error shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    size = diff.size
    if _KINKS is not None:
        _KINKS.append(np.sign(diff))
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=a.dtype)

    def bw(g):
        s = np.sign(diff) * (g / size)
        return s, -s

    return _record(out, (a, b), bw)


def total(xs: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    acc = xs[0]
    for t in xs[1:]:
        acc = add(acc, t)
    return acc


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
