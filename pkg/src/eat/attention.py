"""Windowed attention with a global CLS token.

Every token sees the tokens within ``k // 2`` positions on either side of
itself (positions in the current, possibly pruned, sequence). The CLS
token at position 0 sees and is seen by every token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from eat.tensor import MASK_PENALTY, DimensionError, Matrix, add, matmul, multihead_attention, parameter


@dataclass(frozen=True)
class SparseMask:
    t: int
    k: int | None  # None means dense
    cls_index: int
    allowed: np.ndarray  # t x t bool, one packed row per token when stored

    def bias(self, dtype=np.float32) -> np.ndarray:
        """Additive attention bias: 0 where allowed, a large negative penalty elsewhere."""
        return np.where(self.allowed, 0.0, MASK_PENALTY).astype(dtype)

    def packed(self) -> np.ndarray:
        return np.packbits(self.allowed, axis=1)


def build_sparse_mask(t: int, k: int | None, cls_index: int = 0) -> SparseMask:
    """Allowed-pair mask for ``t`` tokens and total window ``k`` (``None`` = dense)."""
    if t < 1:
        raise ValueError("mask needs at least one token")
    if cls_index != 0:
        raise ValueError("CLS must sit at position 0")
    if k is None:
        return SparseMask(t, None, 0, np.ones((t, t), dtype=bool))
    if k < 0 or k % 2:
        raise ValueError(f"window k must be a nonnegative even number, got {k}")
    idx = np.arange(t)
    allowed = np.abs(idx[:, None] - idx[None, :]) <= k // 2
    allowed[0, :] = True
    allowed[:, 0] = True
    return SparseMask(t, k, 0, allowed)


def count_allowed_pairs(mask: SparseMask) -> int:
    return int(mask.allowed.sum())


def sparse_pair_count(t: int, k: int | None) -> int:
    """Closed-form count of allowed pairs, equal to ``count_allowed_pairs(build_sparse_mask(t, k))``."""
    if k is None:
        return t * t
    m = t - 1  # non-CLS tokens
    # non-CLS pairs within the window, then the full CLS row and column
    window = m + 2 * sum(m - j for j in range(1, min(k // 2, m - 1) + 1))
    return window + 2 * m + 1


@dataclass
class AttentionParams:
    w_q: Matrix
    b_q: Matrix
    w_k: Matrix
    b_k: Matrix
    w_v: Matrix
    b_v: Matrix
    w_o: Matrix
    b_o: Matrix
    heads: int

    def __post_init__(self):
        d = self.w_q.rows
        if d % self.heads:
            raise DimensionError(f"width {d} not divisible by {self.heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.rows

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def matrices(self) -> dict[str, Matrix]:
        return {n: getattr(self, n) for n in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")}


def init_attention(rng: np.random.Generator, d: int, heads: int, std: float = 0.02) -> AttentionParams:
    def w():
        return parameter(rng.normal(0.0, std, size=(d, d)))

    def b():
        return parameter(np.zeros((1, d)))

    return AttentionParams(w(), b(), w(), b(), w(), b(), w(), b(), heads)


def attend(h: Matrix, params: AttentionParams, mask: SparseMask) -> Matrix:
    """Multi-head attention of ``h`` restricted to ``mask``.

    Computes all logits and applies the additive penalty to disallowed
    pairs; the cost actually charged is reported by :func:`count_allowed_pairs`.
    """
    if h.rows != mask.t:
        raise DimensionError(f"{h.rows} tokens but mask built for {mask.t}")
    if h.cols != params.d:
        raise DimensionError(f"hidden width {h.cols} != attention width {params.d}")
    q = add(matmul(h, params.w_q), params.b_q)
    k = add(matmul(h, params.w_k), params.b_k)
    v = add(matmul(h, params.w_v), params.b_v)
    bias = None if mask.allowed.all() else mask.bias(h.data.dtype)
    ctx = multihead_attention(q, k, v, params.heads, bias)
    return add(matmul(ctx, params.w_o), params.b_o)


def dense_attention_reference(h: np.ndarray, params: AttentionParams, allowed: np.ndarray | None = None) -> np.ndarray:
    """Plain float64 per-head attention used as a test oracle.

    Disallowed logits get the same additive penalty as :func:`attend`.
    """
    h = np.asarray(h, dtype=np.float64)
    get = lambda m: np.asarray(m.data, dtype=np.float64)
    q = h @ get(params.w_q) + get(params.b_q)
    k = h @ get(params.w_k) + get(params.b_k)
    v = h @ get(params.w_v) + get(params.b_v)
    t, d = h.shape
    dh = d // params.heads
    out = np.zeros((t, d))
    for head in range(params.heads):
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(t):
            logits = np.array([q[i, cols] @ k[j, cols] / math.sqrt(dh) for j in range(t)])
            if allowed is not None:
                logits = logits + np.where(allowed[i], 0.0, MASK_PENALTY)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, cols] = w @ v[:, cols]
    return out @ get(params.w_o) + get(params.b_o)
