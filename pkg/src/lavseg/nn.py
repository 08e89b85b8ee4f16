"""Shared network building blocks on top of the autodiff ops.

Every block exposes ``params(prefix)`` returning a flat name -> Tensor map;
checkpointing, freezing, and the optimizer all operate on those maps.
Sequences are (S, d) matrices; there is no batch axis. Independent sequences
can share row-wise ops by packing along rows (``forward_packed``).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from lavseg import autodiff as ad
from lavseg.autodiff import Tensor


def set_trainable(params: dict[str, Tensor], flag: bool) -> None:
    for t in params.values():
        t.requires_grad = flag


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 init_scale: float | None = None, zero_init: bool = False):
        s = init_scale if init_scale is not None else 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero_init else rng.normal(0.0, s, (d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return ad.linear(x, self.w, self.b)
        return ad.add_bias(ad.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class Mlp:
    """Linear -> ReLU -> Linear."""

    def __init__(self, rng, d_in: int, d_hidden: int, d_out: int):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return self.fc1.params(f"{prefix}.fc1") | self.fc2.params(f"{prefix}.fc2")


class MultiHeadAttention:
    """Full (bi-directional) scaled dot-product attention.

    ``__call__(q, kv)`` cross-attends queries to keys/values; pass the same
    tensor twice for self-attention. No masking anywhere.
    """

    def __init__(self, rng, d: int, n_heads: int):
        if d % n_heads != 0:
            raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)

    def __call__(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        q = self.wq(q_in)
        k = self.wk(kv_in)
        v = self.wv(kv_in)
        return self.wo(ad.attention(q, k, v, self.n_heads))

    def forward_packed(self, x: Tensor, bounds: Sequence[tuple[int, int]]) -> Tensor:
        """Self-attention over independent row segments of a packed matrix.

        ``bounds`` is a list of (start, length) row spans that tile ``x``.
        The projections run once over all rows; attention never crosses a
        span boundary, so each span gets exactly its standalone result.
        """
        q = self.wq(x)
        k = self.wk(x)
        v = self.wv(x)
        return self.wo(ad.attention_packed(q, k, v, self.n_heads, bounds))

    def forward_packed_cross(self, x_q: Tensor, x_kv: Tensor,
                             q_bounds: Sequence[tuple[int, int]],
                             kv_bounds: Sequence[tuple[int, int]]) -> Tensor:
        """Cross-attention between paired row segments of two packed matrices.

        Span i of ``x_q`` attends to span i of ``x_kv``; spans never mix.
        """
        q = self.wq(x_q)
        k = self.wk(x_kv)
        v = self.wv(x_kv)
        return self.wo(ad.attention_packed(q, k, v, self.n_heads,
                                           q_bounds, kv_bounds))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out |= lin.params(f"{prefix}.{name}")
        return out


class TransformerBlock:
    """Pre-norm residual block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, rng, d: int, n_heads: int, mlp_ratio: int = 4):
        self.attn = MultiHeadAttention(rng, d, n_heads)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(rng, d, mlp_ratio * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.attn(h, h))
        return ad.add(x, self.mlp(self.ln2(x)))

    def forward_packed(self, x: Tensor, bounds: Sequence[tuple[int, int]]) -> Tensor:
        """The block applied independently to row segments of a packed matrix."""
        h = self.ln1(x)
        x = ad.add(x, self.attn.forward_packed(h, bounds))
        return ad.add(x, self.mlp(self.ln2(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return (self.attn.params(f"{prefix}.attn")
                | self.ln1.params(f"{prefix}.ln1")
                | self.ln2.params(f"{prefix}.ln2")
                | self.mlp.params(f"{prefix}.mlp"))
