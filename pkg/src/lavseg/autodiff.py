"""Minimal dense-tensor reverse-mode autodiff.

All values are float64 numpy arrays. Forward ops run eagerly; when a
``Tape`` is active, every op whose inputs are tracked records a backward
rule on the tape, and ``Tape.backward`` replays the records in reverse to
accumulate gradients into the participating leaves.

There is no general broadcasting: shapes must match exactly except for
``add_bias`` (trailing-axes bias) and scalar helpers. Ops never mutate
their inputs.
"""

from __future__ import annotations

import functools
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """A dense float64 array, optionally participating in gradient taping.

    ``requires_grad`` marks a leaf whose gradient should be produced by
    ``Tape.backward``. Intermediate results are tracked automatically while
    a tape is active.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

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

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar (thin wrappers over the module-level ops)
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Records forward ops for one reverse-mode sweep.

    Usable as a context manager; tapes on different threads are fully
    independent. Records are kept in execution (topological) order.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _LOCAL.tape = None

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        for t in inputs:
            if t.requires_grad:
                self._leaves[id(t)] = t
        self._tracked.add(id(output))
        self._records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss into all grad-enabled leaves.

        Leaves recorded on the tape but not contributing to ``loss`` get an
        all-zero gradient of matching shape. Returns the full id -> gradient
        map (leaves and intermediates).
        """
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            out_grad = grads.get(id(rec.output))
            if out_grad is None:
                continue
            in_grads = rec.backward(out_grad)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not self.is_tracked(t):
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        for leaf in self._leaves.values():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
                grads[id(leaf)] = g
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return grads


def _maybe_record(inputs: Sequence[Tensor], output: Tensor, backward) -> Tensor:
    tape = getattr(_LOCAL, "tape", None)
    if tape is None:
        return output
    tracked = tape._tracked
    for t in inputs:
        if t.requires_grad or id(t) in tracked:
            tape.record(inputs, output, backward)
            return output
    return output


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return _maybe_record((a, b), out, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - b.data)
    return _maybe_record((a, b), out, lambda g: (g, -g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` over the trailing axes of ``x`` (the one broadcast allowed)."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    out = Tensor(x.data + b.data)
    return _maybe_record((x, b), out, lambda g: (g, g.sum(axis=lead) if lead else g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return _maybe_record((a, b), out, lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data / b.data)
    return _maybe_record(
        (a, b), out,
        lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    return _maybe_record((x,), out, lambda g: (g * c,))


def add_const(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + float(c))
    return _maybe_record((x,), out, lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    return _maybe_record((x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _maybe_record((x,), out, lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtraction stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _maybe_record((x,), out, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _maybe_record((x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _maybe_record((a, b), out, lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map ``x @ w + b`` recorded as a single op."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output dim {w.shape[1]}")
    out = Tensor(x.data @ w.data + b.data)
    return _maybe_record(
        (x, w, b), out,
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Fused multi-head scaled dot-product attention core.

    Inputs are post-projection (S, d) matrices; heads are contiguous
    column slices of width d // n_heads, each scaled by 1/sqrt(d_head).
    Recorded as one op so a transformer block stays a handful of records.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention: q, k, v must be matrices")
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    if n_heads < 1 or d % n_heads != 0:
        raise ShapeError(f"attention: d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    c = 1.0 / np.sqrt(dh)
    # (H, S, dh) views; copies so head math is contiguous
    qh = q.data.reshape(q.shape[0], n_heads, dh).transpose(1, 0, 2).copy()
    kh = k.data.reshape(k.shape[0], n_heads, dh).transpose(1, 0, 2).copy()
    vh = v.data.reshape(v.shape[0], n_heads, dh).transpose(1, 0, 2).copy()
    scores = (qh @ kh.transpose(0, 2, 1)) * c
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(axis=-1, keepdims=True)
    ctx = att @ vh
    out = Tensor(ctx.transpose(1, 0, 2).reshape(q.shape[0], d))

    def backward(g):
        gh = g.reshape(q.shape[0], n_heads, dh).transpose(1, 0, 2)
        dv = att.transpose(0, 2, 1) @ gh
        datt = gh @ vh.transpose(0, 2, 1)
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dscores @ kh) * c
        dk = (dscores.transpose(0, 2, 1) @ qh) * c
        to_mat = lambda a, n: a.transpose(1, 0, 2).reshape(n, d)
        return (to_mat(dq, q.shape[0]), to_mat(dk, k.shape[0]),
                to_mat(dv, v.shape[0]))

    return _maybe_record((q, k, v), out, backward)


def _check_spans(bounds: Sequence[tuple[int, int]], n: int, what: str) -> list[tuple[int, int]]:
    spans = [(int(s), int(m)) for s, m in bounds]
    pos = 0
    for s, m in spans:
        if s != pos or m < 1:
            raise ShapeError(f"attention_packed: {what} bounds must tile the rows in order")
        pos += m
    if pos != n:
        raise ShapeError(f"attention_packed: {what} bounds must tile the rows in order")
    return spans


def attention_packed(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                     q_bounds: Sequence[tuple[int, int]],
                     kv_bounds: Sequence[tuple[int, int]] | None = None) -> Tensor:
    """``attention`` applied independently to row spans of packed matrices.

    ``q_bounds`` is a sequence of (start, length) spans that tile the rows
    of ``q``; attention never crosses a span boundary. When ``kv_bounds``
    is given (cross-attention), it tiles the rows of ``k``/``v`` and is
    paired with ``q_bounds`` span by span. Equivalent to slicing each span
    out, running ``attention``, and concatenating, but recorded as one op.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention_packed: q, k, v must be matrices")
    n, d = q.shape
    if k.shape != v.shape or k.shape[1] != d:
        raise ShapeError(
            f"attention_packed: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    if n_heads < 1 or d % n_heads != 0:
        raise ShapeError(f"attention_packed: d={d} not divisible by n_heads={n_heads}")
    q_spans = _check_spans(q_bounds, n, "q")
    kv_spans = (q_spans if kv_bounds is None
                else _check_spans(kv_bounds, k.shape[0], "kv"))
    if len(kv_spans) != len(q_spans):
        raise ShapeError("attention_packed: q and kv span counts must match")
    if kv_bounds is None and k.shape[0] != n:
        raise ShapeError("attention_packed: self-attention needs equal row counts")
    dh = d // n_heads
    c = 1.0 / np.sqrt(dh)
    ctx = np.empty_like(q.data)
    saved = []
    for (s, m), (sk, mk) in zip(q_spans, kv_spans):
        qh = q.data[s:s + m].reshape(m, n_heads, dh).transpose(1, 0, 2).copy()
        kh = k.data[sk:sk + mk].reshape(mk, n_heads, dh).transpose(1, 0, 2).copy()
        vh = v.data[sk:sk + mk].reshape(mk, n_heads, dh).transpose(1, 0, 2).copy()
        scores = (qh @ kh.transpose(0, 2, 1)) * c
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx[s:s + m] = (att @ vh).transpose(1, 0, 2).reshape(m, d)
        saved.append((att, qh, kh, vh))
    out = Tensor(ctx)

    def backward(g):
        dq = np.empty_like(q.data)
        dk = np.empty_like(k.data)
        dv = np.empty_like(v.data)
        for (s, m), (sk, mk), (att, qh, kh, vh) in zip(q_spans, kv_spans, saved):
            gh = g[s:s + m].reshape(m, n_heads, dh).transpose(1, 0, 2)
            dvh = att.transpose(0, 2, 1) @ gh
            datt = gh @ vh.transpose(0, 2, 1)
            dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
            dq[s:s + m] = ((dscores @ kh) * c).transpose(1, 0, 2).reshape(m, d)
            dk[sk:sk + mk] = ((dscores.transpose(0, 2, 1) @ qh) * c) \
                .transpose(1, 0, 2).reshape(mk, d)
            dv[sk:sk + mk] = dvh.transpose(1, 0, 2).reshape(mk, d)
        return dq, dk, dv

    return _maybe_record((q, k, v), out, backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    return _maybe_record((x,), out, lambda g: (g.T,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    old = x.shape
    return _maybe_record((x,), out, lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _maybe_record(tuple(parts), out, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}) out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _maybe_record((x,), out, backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.mean(axis=axis))
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, float(g) / n),)
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _maybe_record((x,), out, backward)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full_like(x.data, float(g)),)
        return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)

    return _maybe_record((x,), out, backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup: returns table[ids], gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding: ids must be a 1-D sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    out = Tensor(table.data[ids].copy())

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _maybe_record((table,), out, backward)


# ---------------------------------------------------------------------------
# spatial resampling (constant interpolation matrices, so the matmul rules
# carry the gradients)
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _pool2_matrix(n: int) -> np.ndarray:
    if n % 2 != 0:
        raise ShapeError(f"avg_pool2: axis length {n} is odd")
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        m[i, 2 * i] = 0.5
        m[i, 2 * i + 1] = 0.5
    return m


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-center bilinear interpolation weights, edge-clamped."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * ratio - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling of a matrix (both axes halved)."""
    if x.ndim != 2:
        raise ShapeError(f"avg_pool2: expected a matrix, got shape {x.shape}")
    pr = Tensor(_pool2_matrix(x.shape[0]))
    pc = Tensor(_pool2_matrix(x.shape[1]))
    return matmul(matmul(pr, x), transpose(pc))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of a matrix to (out_h, out_w)."""
    if x.ndim != 2:
        raise ShapeError(f"bilinear_upsample: expected a matrix, got shape {x.shape}")
    ur = Tensor(_bilinear_matrix(out_h, x.shape[0]))
    uc = Tensor(_bilinear_matrix(out_w, x.shape[1]))
    return matmul(matmul(ur, x), transpose(uc))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits_mean(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    if logits.shape != targets.shape:
        raise ShapeError(f"bce: shapes {logits.shape} and {targets.shape} differ")
    ld, g = logits.data, targets.data
    per = np.maximum(ld, 0.0) - ld * g + np.log1p(np.exp(-np.abs(ld)))
    out = Tensor(per.mean())
    n = logits.size

    def backward(gout):
        p = np.empty_like(ld)
        pos = ld >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-ld[pos]))
        e = np.exp(ld[~pos])
        p[~pos] = e / (1.0 + e)
        return (float(gout) * (p - g) / n, None)

    return _maybe_record((logits, targets), out, backward)
