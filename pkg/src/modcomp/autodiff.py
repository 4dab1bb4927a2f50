"""Dense float64 tensors with tape-based reverse-mode differentiation.

numpy supplies storage and kernels; every derivative rule here is written by
hand and checked against central finite differences (see gradcheck.py).

Usage: run the forward pass inside `with Tape() as tape:`, then call
`tape.backward(loss)`. Gradients accumulate into `Tensor.grad`, so shared
subexpressions add up (d(x+x)/dx == 2). Outside a tape nothing is recorded and
forward passes are read-only, which makes inference safe across threads (the
active tape lives in thread-local storage).
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_MASK_VALUE = -1e30


class Tensor:
    """Shape-carrying f64 array, optionally tracked by the active tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the named functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, rng: np.random.Generator | None = None, scale_: float = 0.02) -> Tensor:
    """Trainable tensor; `data` may be a shape tuple (normal init) or an array."""
    if isinstance(data, tuple):
        if rng is None:
            raise ContractError("shape-initialized param needs an rng")
        data = rng.normal(0.0, scale_, size=data)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_ACTIVE = threading.local()


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


def _active_tape():
    return getattr(_ACTIVE, "tape", None)


class Tape:
    """Records ops in execution order; backward replays them reversed.

    Execution order is a topological order of the graph, so the reversed node
    list visits every node exactly once with all downstream gradients already
    accumulated.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("tapes do not nest")
        _ACTIVE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.tape = None

    def backward(self, loss: Tensor) -> None:
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tracked tensor")
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, bwd))
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from the tape."""
    return Tensor(x.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(Tensor(-a.data), (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(Tensor(a.data * s), (a,), lambda g: (g * s,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p; fractional p assumes positive inputs (norms etc.)."""
    p = float(p)
    out = Tensor(a.data ** p)
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) -> (..., m, n); batch dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as e:
        raise DimensionError(f"matmul batch dims disagree: {a.shape} @ {b.shape}") from e

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; `indices` may be any integer shape.

    table (n, d), ids (...,) -> (..., d). Doubles as the embedding lookup.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"take indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"take index out of range [0, {a.shape[0]}): min={idx.min()} max={idx.max()}"
        )
    out = Tensor(a.data[idx])

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, *a.shape[1:]))
        return (buf,)

    return _record(out, (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}, {start + length}) exceeds axis {axis} of shape {a.shape}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl])

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[sl] = g
        return (buf,)

    return _record(out, (a,), bwd)


def sum_(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data ** 2),))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)  # x**3 hits numpy's slow pow path
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    x (..., d), gain (d,), bias (d,) -> (..., d).
    """
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match x {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = np.sum(g * xhat, axis=tuple(range(g.ndim - 1)))
        gbias = np.sum(g, axis=tuple(range(g.ndim - 1)))
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bwd)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows sum to 1."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def logsumexp(x: Tensor) -> Tensor:
    """log sum exp over the last axis, max-subtracted. (..., n) -> (...,)."""
    m = x.data.max(axis=-1, keepdims=True)
    s = np.exp(x.data - m).sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1))

    def bwd(g):
        soft = np.exp(x.data - m) / s
        return (np.expand_dims(g, -1) * soft,)

    return _record(out, (x,), bwd)


def diag_part(x: Tensor) -> Tensor:
    """Main diagonal of a square matrix. (n, n) -> (n,)."""
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag_part needs a square matrix, got {x.shape}")
    n = x.shape[0]
    idx = np.arange(n)
    out = Tensor(x.data[idx, idx])

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[idx, idx] = g
        return (buf,)

    return _record(out, (x,), bwd)


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-normalize the last axis. Zero rows are a domain error."""
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize of a zero vector")
    y = x.data / norms
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# losses and similarities
# ---------------------------------------------------------------------------

def _check_distribution(t: np.ndarray, what: str) -> None:
    if np.any(t < 0.0):
        raise ContractError(f"{what} has negative entries")
    sums = t.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        worst = float(np.abs(sums - 1.0).max())
        raise ContractError(f"{what} rows must sum to 1 within 1e-9 (off by {worst:.3e})")


def softmax_cross_entropy(logits: Tensor, target_dist: Tensor) -> Tensor:
    """-sum(t * log softmax(logits)) for one distribution. (n,), (n,) -> scalar.

    Stable for arbitrarily large logits via max subtraction.
    """
    if logits.ndim != 1 or logits.shape != target_dist.shape:
        raise DimensionError(
            f"softmax_cross_entropy needs matching 1-D inputs, got {logits.shape} vs {target_dist.shape}"
        )
    _check_distribution(target_dist.data, "target_dist")
    m = logits.data.max()
    lse = m + np.log(np.exp(logits.data - m).sum())
    out = Tensor(lse - float(target_dist.data @ logits.data))

    def bwd(g):
        soft = np.exp(logits.data - m)
        soft /= soft.sum()
        return (g * (soft - target_dist.data), g * (lse - logits.data))

    return _record(out, (logits, target_dist), bwd)


def softmax_cross_entropy_rows(logits: Tensor, target_dist: Tensor) -> Tensor:
    """Row-wise cross-entropy. (B, n), (B, n) -> (B,). Same math as above."""
    if logits.ndim != 2 or logits.shape != target_dist.shape:
        raise DimensionError(
            f"softmax_cross_entropy_rows needs matching 2-D inputs, got {logits.shape} vs {target_dist.shape}"
        )
    _check_distribution(target_dist.data, "target_dist")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(logits.data - m).sum(axis=-1, keepdims=True))
    out = Tensor(lse.squeeze(-1) - (target_dist.data * logits.data).sum(axis=-1))

    def bwd(g):
        soft = np.exp(logits.data - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        g2 = np.expand_dims(g, -1)
        return (g2 * (soft - target_dist.data), g2 * (lse - logits.data))

    return _record(out, (logits, target_dist), bwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """cos(a, b) for 1-D vectors; no temperature here, callers scale afterwards."""
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs matching 1-D inputs, got {a.shape} vs {b.shape}")
    if not (np.any(a.data) and np.any(b.data)):
        raise DegenerateInputError("cosine_similarity of a zero vector")
    dot = sum_(mul(a, b))
    na = power(sum_(power(a, 2.0)), 0.5)
    nb = power(sum_(power(b, 2.0)), 0.5)
    return mul(dot, power(mul(na, nb), -1.0))


# ---------------------------------------------------------------------------
# attention building block
# ---------------------------------------------------------------------------

def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 on/below the diagonal, large negative above."""
    return np.triu(np.full((n, n), _MASK_VALUE), k=1)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   n_heads: int, causal: bool) -> Tensor:
    """Multi-head self-attention. x (B, L, d) -> (B, L, d).

    Composed entirely from primitive ops above, so its gradient needs no
    bespoke backward rule.
    """
    bsz, length, d = x.shape
    if d % n_heads != 0:
        raise DimensionError(f"d_model {d} not divisible by n_heads {n_heads}")
    dh = d // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (bsz, length, n_heads, dh)), (0, 2, 1, 3))

    q = split_heads(matmul(x, wq))
    k = split_heads(matmul(x, wk))
    v = split_heads(matmul(x, wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        scores = add(scores, Tensor(causal_mask(length)))
    ctx = matmul(softmax(scores), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, length, d))
    return matmul(ctx, wo)
