"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a handful of primitives, each with a
hand-written backward, recorded on an explicit :class:`Tape`. Everything is
numpy under the hood. The fused primitives (``linear``,
``multihead_attention``, ``softmax``, ``layer_norm``, ``gelu``) exist because
training is memory-bandwidth-bound on a single core; composing them from
elementwise ops roughly doubles wall time.

Conventions:
  * all data is contiguous float64, row-major;
  * gradients accumulate into ``Tensor.grad`` (numpy array, same shape);
  * an operation participates in differentiation only while a tape is active
    and at least one input has ``requires_grad``;
  * a tape supports exactly one backward pass.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericError, ShapeError

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

try:
    from ._kernels import (
        layernorm_backward_2d as _nb_ln_bwd,
        layernorm_forward_2d as _nb_ln_fwd,
        softmax_backward_2d as _nb_softmax_bwd,
    )

    _HAVE_KERNELS = True
except Exception:  # pragma: no cover - numba missing or failing to compile
    _HAVE_KERNELS = False

try:
    from . import _attn_native

    _HAVE_NATIVE_ATTN = True
except ImportError:  # pragma: no cover - extension not built on this platform
    _HAVE_NATIVE_ATTN = False


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape


class TapeConsumedError(RuntimeError):
    """Raised if backward is invoked twice on the same tape."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives; replayed in reverse by backward.

    Confined to one thread. One backward pass per forward; a second backward
    without a fresh forward raises :class:`TapeConsumedError`.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._tracked: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None], inputs: Sequence[Tensor]) -> None:
        self._records.append((out, backward))
        for t in inputs:
            if t.requires_grad:
                self._tracked.append(t)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every tracked tensor reachable from ``loss``."""
        if self._consumed:
            raise TapeConsumedError("tape already replayed; run a new forward pass")
        if loss.data.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, backward in reversed(self._records):
            g = out.grad
            if g is None:
                continue
            backward(g)
        for t in self._tracked:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        self._records.clear()


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # `own` marks buffers freshly allocated by the caller, safe to adopt
    # without copying; anything aliasing the upstream gradient must copy.
    if t.grad is None:
        t.grad = g if own else g.copy()
    else:
        np.add(t.grad, g, out=t.grad)


def _maybe_record(out: Tensor, backward: Callable[[np.ndarray], None], inputs: Sequence[Tensor]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward, inputs)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    """Sum ``g`` down to ``shape``; second element tells if a fresh buffer was made."""
    if g.shape == shape:
        return g, False
    extra = g.ndim - len(shape)
    fresh = False
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
        fresh = True
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
        fresh = True
    return g, fresh


# ---------------------------------------------------------------------------
# Elementwise arithmetic (broadcasting limited to what callers need)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga, own = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, own=own)
        if b.requires_grad:
            gb, own = _unbroadcast(g, b.data.shape)
            _accumulate(b, gb, own=own)

    return _maybe_record(out, backward, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga, own = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, own=own)
        if b.requires_grad:
            gb, _ = _unbroadcast(-g, b.data.shape)
            _accumulate(b, gb, own=True)

    return _maybe_record(out, backward, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga, _ = _unbroadcast(g * b.data, a.data.shape)
            _accumulate(a, ga, own=True)
        if b.requires_grad:
            gb, _ = _unbroadcast(g * a.data, b.data.shape)
            _accumulate(b, gb, own=True)

    return _maybe_record(out, backward, (a, b))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga, _ = _unbroadcast(g / b.data, a.data.shape)
            _accumulate(a, ga, own=True)
        if b.requires_grad:
            gb, _ = _unbroadcast(-g * out.data / b.data, b.data.shape)
            _accumulate(b, gb, own=True)

    return _maybe_record(out, backward, (a, b))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, -g, own=True)

    return _maybe_record(out, backward, (a,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a fixed scalar exponent."""
    c = float(exponent)
    out = Tensor(a.data**c)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (c * a.data ** (c - 1.0)), own=True)

    return _maybe_record(out, backward, (a,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (0.5 / out.data), own=True)

    return _maybe_record(out, backward, (a,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * out.data, own=True)

    return _maybe_record(out, backward, (a,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / a.data, own=True)

    return _maybe_record(out, backward, (a,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is passed through strictly inside."""
    out = Tensor(np.clip(a.data, lo, hi))

    def backward(g: np.ndarray) -> None:
        mask = (a.data > lo) & (a.data < hi)
        _accumulate(a, g * mask, own=True)

    return _maybe_record(out, backward, (a,))


# ---------------------------------------------------------------------------
# Shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.data.shape), own=False)

    return _maybe_record(out, backward, (a,))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.ascontiguousarray(g.transpose(inv)), own=True)

    return _maybe_record(out, backward, (a,))


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; backward scatters into a zero buffer."""
    out = Tensor(a.data[key])

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        buf[key] = g.reshape(buf[key].shape)
        _accumulate(a, buf, own=True)

    return _maybe_record(out, backward, (a,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + n)
                _accumulate(p, np.ascontiguousarray(g[tuple(idx)]), own=True)
            offset += n

    return _maybe_record(out, backward, tuple(parts))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def backward(g: np.ndarray) -> None:
        ga, own = _unbroadcast(g, a.data.shape)
        _accumulate(a, ga, own=own)

    return _maybe_record(out, backward, (a,))


# ---------------------------------------------------------------------------
# Reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy(), own=True)
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy(), own=True)

    return _maybe_record(out, backward, (a,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def backward(g: np.ndarray) -> None:
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy(), own=True)
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy(), own=True)

    return _maybe_record(out, backward, (a,))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D x 2D, or batched with identical leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        if not (ad.ndim == 2 and bd.ndim == 2):
            raise ShapeError(f"matmul batch dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(ad @ bd)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g @ bd.swapaxes(-1, -2), own=True)
        if b.requires_grad:
            _accumulate(b, ad.swapaxes(-1, -2) @ g, own=True)

    return _maybe_record(out, backward, (a, b))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; the single fused projection
    primitive every dense layer in the package goes through."""
    xd = x.data
    k, n = w.data.shape[0], w.data.shape[1]
    if xd.shape[-1] != k:
        raise ShapeError(f"linear: input last axis {xd.shape} does not match weight {w.data.shape}")
    x2 = xd.reshape(-1, k)
    out_d = x2 @ w.data
    if b is not None:
        if b.data.shape != (n,):
            raise ShapeError(f"linear: bias shape {b.data.shape} != ({n},)")
        out_d += b.data
    out = Tensor(out_d.reshape(xd.shape[:-1] + (n,)))

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(-1, n)
        if w.requires_grad:
            _accumulate(w, x2.T @ g2, own=True)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0), own=True)
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(xd.shape), own=True)

    inputs = (x, w) if b is None else (x, w, b)
    return _maybe_record(out, backward, inputs)


# ---------------------------------------------------------------------------
# Fused nonlinearities


def _softmax_rows(s: np.ndarray, out: np.ndarray, chunk: int = 512) -> None:
    """Row-wise stable softmax, chunked so each slab stays cache-resident."""
    rows = s.shape[0]
    for i in range(0, rows, chunk):
        sl = s[i : i + chunk]
        o = out[i : i + chunk]
        m = sl.max(axis=1, keepdims=True)
        np.subtract(sl, m, out=o)
        np.exp(o, out=o)
        tot = o.sum(axis=1, keepdims=True)
        np.divide(o, tot, out=o)


def _softmax_backward_rows(a: np.ndarray, g: np.ndarray, out: np.ndarray) -> None:
    if _HAVE_KERNELS:
        _nb_softmax_bwd(a, g, out)
        return
    dots = np.einsum("ij,ij->i", a, g)[:, None]
    np.subtract(g, dots, out=out)
    np.multiply(out, a, out=out)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax over the last axis; rows sum to 1."""
    if axis not in (-1, x.data.ndim - 1):
        raise ShapeError("softmax supports the last axis only")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    xd = x.data
    cols = xd.shape[-1]
    x2 = xd.reshape(-1, cols)
    a2 = np.empty_like(x2)
    _softmax_rows(x2, a2)
    out = Tensor(a2.reshape(xd.shape))

    def backward(g: np.ndarray) -> None:
        ds = np.empty_like(a2)
        _softmax_backward_rows(a2, g.reshape(-1, cols), ds)
        _accumulate(x, ds.reshape(xd.shape), own=True)

    return _maybe_record(out, backward, (x,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-slice normalization over the last axis, then affine."""
    if eps <= 0:
        raise ShapeError(f"layer_norm eps must be positive, got {eps}")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim ({d},)"
        )
    xd = x.data
    x2 = xd.reshape(-1, d)
    rows = x2.shape[0]
    out2 = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty(rows, dtype=np.float64)
    if _HAVE_KERNELS:
        _nb_ln_fwd(x2, gamma.data, beta.data, eps, out2, xhat, inv)
    else:
        mu = x2.mean(axis=1, keepdims=True)
        np.subtract(x2, mu, out=xhat)
        var = np.mean(xhat * xhat, axis=1, keepdims=True)
        inv[:] = 1.0 / np.sqrt(var[:, 0] + eps)
        xhat *= inv[:, None]
        np.multiply(xhat, gamma.data, out=out2)
        out2 += beta.data
    out = Tensor(out2.reshape(xd.shape))

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(-1, d)
        if _HAVE_KERNELS:
            dgamma = gamma.grad if (gamma.requires_grad and gamma.grad is not None) else np.zeros(d)
            dbeta = beta.grad if (beta.requires_grad and beta.grad is not None) else np.zeros(d)
            dx = np.empty_like(x2)
            _nb_ln_bwd(g2, xhat, inv, gamma.data, dx, dgamma, dbeta)
            if gamma.requires_grad:
                gamma.grad = dgamma
            if beta.requires_grad:
                beta.grad = dbeta
            if x.requires_grad:
                _accumulate(x, dx.reshape(xd.shape), own=True)
        else:
            if gamma.requires_grad:
                _accumulate(gamma, np.einsum("nd,nd->d", g2, xhat), own=True)
            if beta.requires_grad:
                _accumulate(beta, g2.sum(axis=0), own=True)
            if x.requires_grad:
                dxhat = g2 * gamma.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                dx = inv[:, None] * (dxhat - m1 - xhat * m2)
                _accumulate(x, dx.reshape(xd.shape), own=True)

    return _maybe_record(out, backward, (x, gamma, beta))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    xd = x.data
    c = np.multiply(xd, _SQRT1_2)
    _erf(c, out=c)
    c += 1.0
    c *= 0.5
    out = Tensor(xd * c)

    def backward(g: np.ndarray) -> None:
        u = xd * xd
        u *= -0.5
        np.exp(u, out=u)
        u *= _INV_SQRT_2PI
        u *= xd
        u += c
        u *= g
        _accumulate(x, u, own=True)

    return _maybe_record(out, backward, (x,))


def l2_normalize(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Normalize the last axis to unit length; degenerate rows are an error."""
    xd = x.data
    n = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    if (n < min_norm).any():
        bad = np.argwhere(n[..., 0] < min_norm)[0]
        raise NumericError(f"l2_normalize: near-zero vector at index {tuple(int(i) for i in bad)}")
    y = xd / n
    out = Tensor(y)

    def backward(g: np.ndarray) -> None:
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _accumulate(x, (g - y * dot) / n, own=True)

    return _maybe_record(out, backward, (x,))


# ---------------------------------------------------------------------------
# Attention


def multihead_attention(qkv: Tensor, num_heads: int, scale: float) -> Tensor:
    """Multi-head softmax(scale * q @ k^T) @ v from packed projections.

    ``qkv`` has shape (B, N, 3E) with the query/key/value thirds along the
    last axis; returns (B, N, E). Runs one (N, N) slice per (batch, head)
    pair so the score matrix stays cache-resident; backward recomputes the
    probabilities, which beats round-tripping them through main memory.
    Dispatches to the compiled extension when it was built.
    """
    d = qkv.data
    if d.ndim != 3 or d.shape[-1] % (3 * num_heads) != 0:
        raise ShapeError(f"attention expects (B, N, 3*heads*hd), got {d.shape} with {num_heads} heads")
    b, n, three_e = d.shape
    e = three_e // 3

    if _HAVE_NATIVE_ATTN:
        out_d = np.empty((b, n, e), dtype=np.float64)
        _attn_native.attention_forward(d, num_heads, scale, out_d)
        out = Tensor(out_d)

        def backward(g: np.ndarray) -> None:
            dqkv = np.empty_like(d)
            _attn_native.attention_backward(d, num_heads, scale, np.ascontiguousarray(g), dqkv)
            _accumulate(qkv, dqkv, own=True)

        return _maybe_record(out, backward, (qkv,))

    hd = e // num_heads
    slices = b * num_heads
    # private (3, B, H, N, hd) copy; queries pre-scaled so scale is applied once
    qkv5 = np.ascontiguousarray(d.reshape(b, n, 3, num_heads, hd).transpose(2, 0, 3, 1, 4))
    q3 = qkv5[0].reshape(slices, n, hd)
    k3 = qkv5[1].reshape(slices, n, hd)
    v3 = qkv5[2].reshape(slices, n, hd)
    q3 *= scale
    out3 = np.empty((slices, n, hd), dtype=np.float64)
    p = np.empty((n, n), dtype=np.float64)

    def _probs(i: int, s: np.ndarray) -> np.ndarray:
        np.matmul(q3[i], k3[i].T, out=s)
        m = s.max(axis=1, keepdims=True)
        np.subtract(s, m, out=s)
        np.exp(s, out=s)
        tot = s.sum(axis=1, keepdims=True)
        np.divide(s, tot, out=s)
        return s

    for i in range(slices):
        np.matmul(_probs(i, p), v3[i], out=out3[i])
    out_d = np.ascontiguousarray(out3.reshape(b, num_heads, n, hd).transpose(0, 2, 1, 3)).reshape(b, n, e)
    out = Tensor(out_d)

    def backward(g: np.ndarray) -> None:
        g3 = np.ascontiguousarray(g.reshape(b, n, num_heads, hd).transpose(0, 2, 1, 3)).reshape(slices, n, hd)
        dqkv5 = np.empty((3, b, num_heads, n, hd), dtype=np.float64)
        dq3 = dqkv5[0].reshape(slices, n, hd)
        dk3 = dqkv5[1].reshape(slices, n, hd)
        dv3 = dqkv5[2].reshape(slices, n, hd)
        s = np.empty((n, n), dtype=np.float64)
        da = np.empty((n, n), dtype=np.float64)
        for i in range(slices):
            a = _probs(i, s)
            gi = g3[i]
            np.matmul(gi, v3[i].T, out=da)
            np.matmul(a.T, gi, out=dv3[i])
            _softmax_backward_rows(a, da, da)
            np.matmul(da, k3[i], out=dq3[i])
            dq3[i] *= scale
            np.matmul(da.T, q3[i], out=dk3[i])  # q3 holds scale*q, matching d(scale*q@k^T)/dk
        dqkv = np.ascontiguousarray(dqkv5.transpose(1, 3, 0, 2, 4)).reshape(b, n, three_e)
        _accumulate(qkv, dqkv, own=True)

    return _maybe_record(out, backward, (qkv,))


# ---------------------------------------------------------------------------
# Spatial resampling (built on cached per-axis weight matrices)


def _pool_matrix(size: int, kernel: int) -> np.ndarray:
    out_size = -(-size // kernel)
    m = np.zeros((out_size, size), dtype=np.float64)
    for r in range(out_size):
        lo = r * kernel
        hi = min(lo + kernel, size)
        m[r, lo:hi] = 1.0 / (hi - lo)
    return m


def _interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    # align-corners-false: output pixel centers mapped into input pixel space
    m = np.zeros((out_size, in_size), dtype=np.float64)
    ratio = in_size / out_size
    for r in range(out_size):
        src = (r + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_size - 1)
        w1 = src - i0
        m[r, i0] += 1.0 - w1
        m[r, i1] += w1
    return m


_matrix_cache: dict[tuple, np.ndarray] = {}


def _cached(kind: str, *args: int) -> np.ndarray:
    key = (kind,) + args
    m = _matrix_cache.get(key)
    if m is None:
        m = _pool_matrix(args[0], args[1]) if kind == "pool" else _interp_matrix(args[0], args[1])
        _matrix_cache[key] = m
    return m


def _apply_spatial(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    # x: (..., h, w, c) -> (..., H, W, c) via per-axis weight matrices
    y = np.einsum("Hh,...hwc->...Hwc", mh, x)
    return np.ascontiguousarray(np.einsum("Ww,...hwc->...hWc", mw, y))


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Non-overlapping average pooling with truncated edge windows.

    ``stride`` must equal ``kernel`` (the only mode anything here needs);
    edge windows shorter than ``kernel`` average over the valid cells only.
    """
    if kernel <= 0:
        raise ShapeError(f"avg_pool2d kernel must be positive, got {kernel}")
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise ShapeError(f"avg_pool2d requires kernel == stride, got {kernel} != {stride}")
    if x.data.ndim < 3:
        raise ShapeError(f"avg_pool2d expects (..., h, w, c), got {x.data.shape}")
    h, w = x.data.shape[-3], x.data.shape[-2]
    mh = _cached("pool", h, kernel)
    mw = _cached("pool", w, kernel)
    out = Tensor(_apply_spatial(x.data, mh, mw))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _apply_spatial(g, mh.T, mw.T), own=True)

    return _maybe_record(out, backward, (x,))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners-false bilinear interpolation to (out_h, out_w)."""
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"bilinear_upsample target must be positive, got {out_h}x{out_w}")
    if x.data.ndim < 3:
        raise ShapeError(f"bilinear_upsample expects (..., h, w, c), got {x.data.shape}")
    h, w = x.data.shape[-3], x.data.shape[-2]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    mh = _cached("interp", out_h, h)
    mw = _cached("interp", out_w, w)
    out = Tensor(_apply_spatial(x.data, mh, mw))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _apply_spatial(g, mh.T, mw.T), own=True)

    return _maybe_record(out, backward, (x,))


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradCheckReport:
    """Outcome of comparing backward gradients against central differences."""

    max_rel_error: float
    n_coords: int
    deterministic: bool
    passed: bool
    tol: float


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    tol: float = 1e-4,
    n_coords: int = 32,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    Samples at least ``n_coords`` coordinates (all of them when the input is
    small). Relative error uses max(|analytic|, |numeric|, 1) as denominator
    so near-zero gradients compare absolutely. A non-deterministic ``f``
    invalidates the check and is reported as such rather than producing a
    misleading error figure.
    """
    base = x.data.copy()
    y1 = f(Tensor(base)).data.copy()
    y2 = f(Tensor(base)).data.copy()
    if y1.shape != () or y2.shape != ():
        raise ShapeError(f"grad_check requires scalar-valued f, got shape {y1.shape}")
    if not (y1 == y2).all():
        return GradCheckReport(math.inf, 0, deterministic=False, passed=False, tol=tol)

    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        tape.backward(y)
    ga = xt.grad
    assert ga is not None

    total = base.size
    rng = np.random.default_rng(seed)
    if total <= n_coords:
        coords = np.arange(total)
    else:
        coords = rng.choice(total, size=n_coords, replace=False)

    flat = base.reshape(-1)
    max_rel = 0.0
    for idx in coords:
        orig = flat[idx]
        xp = orig + step
        xm = orig - step
        flat[idx] = xp
        fp = float(f(Tensor(base)).data)
        flat[idx] = xm
        fm = float(f(Tensor(base)).data)
        flat[idx] = orig
        fd = (fp - fm) / (xp - xm)
        an = float(ga.reshape(-1)[idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1.0)
        if rel > max_rel:
            max_rel = rel
    return GradCheckReport(float(max_rel), len(coords), deterministic=True, passed=max_rel < tol, tol=tol)
