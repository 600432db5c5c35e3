"""Differentiable primitives.

Every function takes and returns :class:`Tensor`.  Shape conventions used by
the model:

* convolution/pooling operate channel-major ``[C, T]``;
* transformer math operates time-major ``[T, D]`` (attention adds a leading
  head axis ``[H, T, d]``).

Each primitive documents its shape rule; the backward rule lives next to the
forward so the pairing is auditable.  All primitives are covered by the
finite-difference registry in :mod:`jooci.autodiff.gradcheck`.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tape, Tensor, debug_checks_enabled

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _finite(arr: np.ndarray, op: str) -> None:
    if debug_checks_enabled() and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite values in forward output")


def _make(op: str, inputs: Sequence[Tensor], data: np.ndarray, rule) -> Tensor:
    """Wrap a forward result, recording a tape node when gradients are live."""
    _finite(data, op)
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(op, inputs, out, rule)
    return out


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting allowed, summed out in backward)

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data
    return _make("add", (a, b), data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data
    return _make("sub", (a, b), data,
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data
    return _make("mul", (a, b), data,
                 lambda g: (unbroadcast(g * b.data, a.shape),
                            unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data / b.data
    return _make("div", (a, b), data,
                 lambda g: (unbroadcast(g / b.data, a.shape),
                            unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    return _make("scale", (a,), a.data * s, lambda g: (g * s,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make("sqrt", (a,), data, lambda g: (g * 0.5 / data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make("exp", (a,), data, lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    return _make("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return _make("tanh", (a,), data, lambda g: (g * (1.0 - data * data),))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    return _make("relu", (a,), data, lambda g: (g * (a.data > 0),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def rule(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make("gelu", (a,), data, rule)


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", (a,), a.data.transpose(axes),
                 lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, split_at, axis=axis))

    return _make("concat", tensors, data, rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of size {a.shape[axis]}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return _make("narrow", (a,), a.data[sl].copy(), rule)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    """Gather rows/columns along ``axis``; duplicates accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index_select expects 1-d indices, got shape {idx.shape}")
    data = np.take(a.data, idx, axis=axis)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, tuple(idx if d == axis else slice(None) for d in range(a.ndim)), g)
        return (full,)

    return _make("index_select", (a,), data, rule)


def pad1d(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return _make("pad1d", (a,), np.pad(a.data, widths), lambda g: (g[sl],))


def repeat_time(a: Tensor, k: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling: repeat each entry ``k`` times along ``axis``."""
    data = np.repeat(a.data, k, axis=axis)

    def rule(g):
        shp = g.shape[:axis] + (a.shape[axis], k) + g.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make("repeat_time", (a,), data, rule)


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(g.dtype),)

    return _make("sum", (a,), data, rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(g.dtype) / count,)

    return _make("mean", (a,), data, rule)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d, or 3-d with matching leading (head) axis."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul supports matching 2-d/3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: leading batch axes differ, {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def rule(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make("matmul", (a, b), data, rule)


# ---------------------------------------------------------------------------
# convolution / pooling (channel-major [C, T])

def _window_index(t_in: int, kernel: int, stride: int, dilation: int) -> np.ndarray:
    span = dilation * (kernel - 1) + 1
    t_out = (t_in - span) // stride + 1
    return np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :] * dilation


def conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """1-d convolution, ``x [C_in, T]``, ``w [C_out, C_in/groups, K]`` -> ``[C_out, T']``.

    ``T' = floor((T - dilation*(K-1) - 1)/stride) + 1``.  ``groups == C_in``
    with one input channel per filter is the depthwise case.
    """
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x[C,T] and w[Cout,Cin/g,K], got {x.shape}, {w.shape}")
    c_in, t_in = x.shape
    c_out, c_in_g, kernel = w.shape
    if c_in % groups != 0:
        raise ShapeError(f"conv1d: input channels {c_in} not divisible by groups {groups}")
    if c_out % groups != 0:
        raise ShapeError(f"conv1d: output channels {c_out} not divisible by groups {groups}")
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"conv1d: weight expects {c_in_g} channels per group but input provides {c_in // groups}")
    span = dilation * (kernel - 1) + 1
    if t_in < span:
        raise ShapeError(f"conv1d: input length {t_in} shorter than effective kernel span {span}")
    idx = _window_index(t_in, kernel, stride, dilation)
    t_out = idx.shape[0]
    ig, og = c_in // groups, c_out // groups
    # [C_in, T', K] -> [G, ig*K, T'] so the contraction is a batched matmul
    win = x.data[:, idx]
    win_g = win.reshape(groups, ig, t_out, kernel).transpose(0, 1, 3, 2) \
               .reshape(groups, ig * kernel, t_out)
    w_g = w.data.reshape(groups, og, ig * kernel)
    out = np.matmul(w_g, win_g).reshape(c_out, t_out)
    inputs = (x, w)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} != ({c_out},)")
        out = out + bias.data[:, None]
        inputs = (x, w, bias)

    def rule(g):
        g_g = g.reshape(groups, og, t_out)
        d_w = np.matmul(g_g, win_g.transpose(0, 2, 1)).reshape(w.shape)
        d_win = np.matmul(w_g.transpose(0, 2, 1), g_g) \
            .reshape(groups, ig, kernel, t_out).transpose(0, 1, 3, 2) \
            .reshape(c_in, t_out, kernel)
        d_x = np.zeros(x.shape, dtype=g.dtype)
        # per kernel tap the targets are uniformly strided, so the scatter
        # decomposes into K strided +='s (overlap lands across different taps)
        for k in range(kernel):
            lo = k * dilation
            d_x[:, lo:lo + (t_out - 1) * stride + 1:stride] += d_win[:, :, k]
        return (d_x, d_w, g.sum(axis=1)) if bias is not None else (d_x, d_w)

    return _make("conv1d", inputs, out, rule)


def avg_pool1d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Mean pooling over time windows, ``[C, T] -> [C, floor((T-kernel)/stride)+1]``."""
    if x.ndim != 2:
        raise ShapeError(f"avg_pool1d expects x[C,T], got {x.shape}")
    t_in = x.shape[1]
    if kernel > t_in:
        raise ShapeError(f"avg_pool1d: kernel {kernel} larger than input length {t_in}")
    idx = _window_index(t_in, kernel, stride, 1)
    out = x.data[:, idx].mean(axis=2)

    def rule(g):
        d_x = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(d_x, (slice(None), idx),
                  np.broadcast_to(g[:, :, None] / kernel, (x.shape[0],) + idx.shape))
        return (d_x,)

    return _make("avg_pool1d", (x,), out, rule)


# ---------------------------------------------------------------------------
# normalisation

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make("softmax", (a,), s, rule)


def norm_axis(x: Tensor, gamma: Tensor, beta: Tensor, axis: int, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis`` then scale/shift: layer norm with axis=-1,
    per-channel (instance) norm on ``[C, T]`` with axis=1.  ``gamma``/``beta``
    must broadcast against ``x``."""
    axis = axis % x.ndim
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[axis]

    def rule(g):
        gg = g * gamma.data
        d_x = inv * (gg - gg.mean(axis=axis, keepdims=True)
                     - xhat * (gg * xhat).mean(axis=axis, keepdims=True))
        d_gamma = unbroadcast(g * xhat, gamma.shape)
        d_beta = unbroadcast(g, beta.shape)
        return (d_x.astype(g.dtype), d_gamma, d_beta)

    del n
    return _make("norm_axis", (x, gamma, beta), out.astype(x.data.dtype), rule)


def batch_norm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: np.ndarray, running_var: np.ndarray,
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Feature-wise batch norm on ``[C, N]`` (statistics over axis 1).

    Training mode normalises with current-batch statistics and updates the
    running buffers in place (momentum 0.1, biased variance); eval mode uses
    the running statistics, so output is independent of batch composition.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm1d expects x[C,N], got {x.shape}")
    c, n = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm1d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if training:
        mu = x.data.mean(axis=1)
        var = x.data.var(axis=1)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[:, None]) * inv[:, None]
        out = xhat * gamma.data[:, None] + beta.data[:, None]

        def rule(g):
            gg = g * gamma.data[:, None]
            d_x = inv[:, None] * (gg - gg.mean(axis=1, keepdims=True)
                                  - xhat * (gg * xhat).mean(axis=1, keepdims=True))
            return (d_x.astype(g.dtype), (g * xhat).sum(axis=1), g.sum(axis=1))

        return _make("batch_norm1d", (x, gamma, beta), out.astype(x.data.dtype), rule)

    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean[:, None]) * inv[:, None]
    out = xhat * gamma.data[:, None] + beta.data[:, None]

    def rule(g):
        return (g * (gamma.data * inv)[:, None], (g * xhat).sum(axis=1), g.sum(axis=1))

    return _make("batch_norm1d_eval", (x, gamma, beta), out.astype(x.data.dtype), rule)


# ---------------------------------------------------------------------------
# gradient-flow control

def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to its input."""
    return Tensor(a.data)


def grad_reverse(a: Tensor, lam: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    return _make("grad_reverse", (a,), a.data.copy(), lambda g: (-lam * g,))


# ---------------------------------------------------------------------------
# similarity / classification losses

def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """``u.v / (||u||+eps)(||v||+eps)`` for 1-d vectors; zero vectors give 0
    with zero gradient."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape}, {v.shape}")
    nu = float(np.linalg.norm(u.data)) + eps
    nv = float(np.linalg.norm(v.data)) + eps
    cos = float(u.data @ v.data) / (nu * nv)

    def rule(g):
        g = float(g)
        du = g * (v.data / (nu * nv) - cos * u.data / (nu * nu))
        dv = g * (u.data / (nu * nv) - cos * v.data / (nv * nv))
        return (du, dv)

    return _make("cosine_similarity", (u, v), np.asarray(cos, dtype=u.data.dtype), rule)


def cross_entropy_columns(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over the columns of ``logits [C, N]``.

    ``targets`` is an int sequence of length N.  Computed with
    max-subtraction; backward is ``(softmax - onehot)/N``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_columns expects logits[C,N], got {logits.shape}")
    c, n = logits.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.shape[0] != n:
        raise ShapeError(f"cross_entropy_columns: {tgt.shape[0]} targets for {n} columns")
    if tgt.min(initial=0) < 0 or tgt.max(initial=-1) >= c:
        bad = tgt[(tgt < 0) | (tgt >= c)][0]
        raise ValueError(f"target {bad} out of range for {c} classes")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    loss = float(np.mean(lse - z[tgt, np.arange(n)]))

    def rule(g):
        p = np.exp(z - lse[None, :])
        p[tgt, np.arange(n)] -= 1.0
        return (float(g) * p / n,)

    return _make("cross_entropy", (logits,), np.asarray(loss, dtype=logits.data.dtype), rule)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a single logit vector ``[C]``."""
    if logits.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects 1-d logits, got {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise ValueError(f"target {target} out of range for {logits.shape[0]} classes")
    col = reshape(logits, (logits.shape[0], 1))
    return cross_entropy_columns(col, [int(target)])


# ---------------------------------------------------------------------------
# operator sugar

def _radd(a, b):
    return add(a, b)


Tensor.__add__ = add
Tensor.__radd__ = _radd
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda a, b: sub(_as_tensor(b, a), a)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda a, b: mul(a, b)
Tensor.__truediv__ = div
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
