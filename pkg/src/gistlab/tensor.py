"""Dense tensors with reverse-mode autodiff on a define-by-run tape.

Storage is numpy (float32 by default, float64 for verification work).
Ops record a node on the active ``Tape`` whenever an input requires
gradients; ``backward`` replays the tape in reverse construction order,
which is a valid topological order because every node's inputs were
created before the node itself. Outside a ``with Tape():`` block all ops
run in inference mode and produce detached results.

Gradient buffers are lazy: a tensor with ``requires_grad=False`` never
receives one, which is what the frozen-parameter audits rely on.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import NumericError, ParameterError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

_SQRT_2 = np.sqrt(2.0)
_ACTIVE_TAPE: list["Tape"] = []


class Tape:
    """Ordered record of op nodes for one forward pass (define-by-run)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _active_tape():
    return _ACTIVE_TAPE[-1] if _ACTIVE_TAPE else None


class Tensor:
    """Dense n-dimensional value, optionally a node on an autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(value, inputs, backward_fn):
    """Wrap an op result, recording it on the active tape when needed."""
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf on the tape.

    The adjoints of intermediate nodes live in a per-call dict, so calling
    backward twice doubles leaf gradients without double-counting internals.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.tape is None:
        raise TapeError("tensor is not attached to a tape (detached or built outside a Tape block)")
    tape = loss.tape
    adjoint = {loss.tape_id: np.ones_like(loss.data)}

    def accum(t, g):
        if not t.requires_grad:
            return
        g = np.asarray(g, dtype=t.data.dtype)
        if t.tape is tape and t.tape_id is not None:
            prev = adjoint.get(t.tape_id)
            adjoint[t.tape_id] = g if prev is None else prev + g
        else:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    for idx in range(loss.tape_id, -1, -1):
        g = adjoint.pop(idx, None)
        if g is None:
            continue
        _out, _inputs, backward_fn = tape.nodes[idx]
        backward_fn(g, accum)


def zero_grad(tensors):
    """Drop gradient buffers (re-allocated lazily on the next backward)."""
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    out = a.data + b.data

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.data.shape))
        accum(b, _unbroadcast(g, b.data.shape))

    return _result(out, (a, b), bwd)


def sub(a, b):
    out = a.data - b.data

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.data.shape))
        accum(b, _unbroadcast(-g, b.data.shape))

    return _result(out, (a, b), bwd)


def mul(a, b):
    out = a.data * b.data

    def bwd(g, accum):
        accum(a, _unbroadcast(g * b.data, a.data.shape))
        accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bwd)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out = a.data * c

    def bwd(g, accum):
        accum(a, g * c)

    return _result(out, (a,), bwd)


def matmul(a, b):
    """Matrix product. Supports 2-D operands, equal-stacked leading dims,
    and a stacked left operand against a 2-D weight."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g, accum):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        accum(a, _unbroadcast(ga, a.data.shape))
        accum(b, _unbroadcast(gb, b.data.shape))

    return _result(out, (a, b), bwd)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bwd(g, accum):
        accum(a, g.reshape(a.data.shape))

    return _result(out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bwd(g, accum):
        accum(a, np.transpose(g, inverse))

    return _result(out, (a,), bwd)


def broadcast_to(a, shape):
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g, accum):
        accum(a, _unbroadcast(g, a.data.shape))

    return _result(out, (a,), bwd)


def concat(tensors, axis):
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, accum):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accum(t, g[tuple(idx)])

    return _result(out, tuple(tensors), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis; backward scatters into zeros."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def bwd(g, accum):
        full = np.zeros_like(a.data)
        full[idx] = g
        accum(a, full)

    return _result(out, (a,), bwd)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, accum):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g, accum):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accum(a, np.broadcast_to(g, a.data.shape) / n)

    return _result(out, (a,), bwd)


def gelu(a):
    """Exact Gaussian-error-linear-unit, 0.5*x*(1+erf(x/sqrt(2)))."""
    x = a.data
    e = erf(x / _SQRT_2)
    out = 0.5 * x * (1.0 + e)

    def bwd(g, accum):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        accum(a, g * (0.5 * (1.0 + e) + x * pdf))

    return _result(out, (a,), bwd)


GELU_VARIANT = "erf"


def softmax_t(a, T):
    """Temperature-softened softmax over the last axis, max-subtracted."""
    if T <= 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    if np.isnan(a.data).any():
        raise NumericError("softmax_t received NaN input")
    z = a.data / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, accum):
        inner = (g * p).sum(axis=-1, keepdims=True)
        accum(a, p * (g - inner) / T)

    return _result(p, (a,), bwd)


def log_softmax_t(a, T):
    """log of softmax_t via log-sum-exp (stable at small T)."""
    if T <= 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    z = a.data / T
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse

    def bwd(g, accum):
        p = np.exp(logp)
        accum(a, (g - p * g.sum(axis=-1, keepdims=True)) / T)

    return _result(logp, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Standardize over the last axis, then apply the affine gamma*x + beta."""
    d = a.data.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over a zero-length last axis")
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"affine params must have shape ({d},), got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g, accum):
        reduce_axes = tuple(range(g.ndim - 1))
        accum(beta, g.sum(axis=reduce_axes))
        accum(gamma, (g * xhat).sum(axis=reduce_axes))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        accum(a, inv * (gx - m1 - xhat * m2))

    return _result(out, (a, gamma, beta), bwd)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label], stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B,K] logits, got {logits.data.shape}")
    b, k = logits.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} out of range [0, {k})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = -logp[np.arange(b), labels].mean()

    def bwd(g, accum):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        accum(logits, g * p / b)

    return _result(out, (logits,), bwd)


def kl_divergence(p_logits, q_logits, T):
    """Mean over the batch of KL(softmax_t(p) || softmax_t(q)).

    Log-probabilities come from log-sum-exp, never from log of softmax.
    Gradients flow into both logit tensors.
    """
    if T <= 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    if p_logits.data.shape != q_logits.data.shape:
        raise ShapeError(
            f"logit shapes differ: {p_logits.data.shape} vs {q_logits.data.shape}"
        )

    def _logp(z):
        z = z / T
        zmax = z.max(axis=-1, keepdims=True)
        return z - (zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)))

    lp = _logp(p_logits.data)
    lq = _logp(q_logits.data)
    p = np.exp(lp)
    b = p_logits.data.shape[0] if p_logits.data.ndim > 1 else 1
    per_row = (p * (lp - lq)).sum(axis=-1)
    out = per_row.mean()

    def bwd(g, accum):
        q = np.exp(lq)
        diff = lp - lq
        gp = p * (diff - per_row[..., None]) / (T * b)
        gq = (q - p) / (T * b)
        accum(p_logits, g * gp)
        accum(q_logits, g * gq)

    return _result(out, (p_logits, q_logits), bwd)


def cosine_rows(a, b):
    """Per-row cosine similarity of two [B,K] tensors.

    Rows where either vector is all-zero get similarity 0 (and zero
    gradient), by definition.
    """
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(f"cosine_rows expects matching [B,K] inputs, got {a.data.shape} and {b.data.shape}")
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    denom = na * nb
    ok = denom > 0
    dots = (a.data * b.data).sum(axis=-1)
    out = np.where(ok, dots / np.where(ok, denom, 1.0), 0.0)

    def bwd(g, accum):
        safe_na = np.where(ok, na, 1.0)
        safe_nb = np.where(ok, nb, 1.0)
        c = out
        ga = (b.data / (safe_na * safe_nb)[:, None] - a.data * (c / (safe_na**2))[:, None])
        gb = (a.data / (safe_na * safe_nb)[:, None] - b.data * (c / (safe_nb**2))[:, None])
        mask = ok[:, None]
        accum(a, g[:, None] * ga * mask)
        accum(b, g[:, None] * gb * mask)

    return _result(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, h=1e-4):
    """Max relative error between autodiff and central differences.

    ``f`` maps the tensor ``x`` to a scalar Tensor and may close over other
    tensors. Only ``x.grad`` is inspected (and reset first). Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8). Run in float64 for
    meaningful tolerances.
    """
    x.grad = None
    with Tape():
        out = f(x)
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)

    ana = analytic.reshape(-1).astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(ana - numeric) / denom))


# ---------------------------------------------------------------------------
# initialization helpers
# ---------------------------------------------------------------------------

def trunc_normal(rng, shape, std=0.02, dtype=DEFAULT_DTYPE):
    """Normal(0, std) resampled until within +-2 std."""
    vals = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(vals) > 2.0 * std
        if not bad.any():
            break
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(vals, -2.0 * std, 2.0 * std).astype(dtype)
