"""Rank-2 numeric kernel with reverse-mode gradients.

Every value is a :class:`Matrix` wrapping a 2-D numpy array. Operations
record their inputs and a backward closure when any input requires a
gradient, which implicitly builds the computation graph walked by
:func:`backward`. Values default to 32-bit floats; :func:`precision`
switches the working dtype (gradient checks run in float64).
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_PENALTY = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)

_state = {"dtype": np.float32, "grad_enabled": True}


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def default_dtype():
    return _state["dtype"]


class Matrix:
    """A rows x cols block of reals that can take part in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Matrix", ...] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or op == "leaf":
            arr = arr.astype(_state["dtype"], copy=op == "leaf")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Matrix must be rank 2, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Matrix{tag}({self.rows}x{self.cols}, op={self.op})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Matrix) -> Matrix:
    if isinstance(x, Matrix):
        return x
    return constant(np.full((1, 1), x, dtype=like.data.dtype))


def parameter(data, name: str | None = None) -> Matrix:
    return Matrix(data, requires_grad=True, name=name)


def constant(data) -> Matrix:
    return Matrix(data)


def _make(data: np.ndarray, op: str, parents: tuple[Matrix, ...], backward) -> Matrix:
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        return Matrix(data, requires_grad=True, op=op, parents=parents, backward=backward)
    return Matrix(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Matrix, b: Matrix) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, "matmul", (a, b), back)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; a 1-row or 1-col operand broadcasts."""
    _check_broadcast(a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), back)


def mul(a: Matrix, b: Matrix) -> Matrix:
    _check_broadcast(a, b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), back)


def scale(a: Matrix, s: float) -> Matrix:
    out = a.data * a.data.dtype.type(s)
    return _make(out, "scale", (a,), lambda g: (g * s,))


def transpose(a: Matrix) -> Matrix:
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def sum_all(a: Matrix) -> Matrix:
    out = a.data.sum(dtype=a.data.dtype).reshape(1, 1)
    return _make(out, "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_rows(a: Matrix) -> Matrix:
    """Column-wise sum over rows, giving 1 x cols."""
    out = a.data.sum(axis=0, keepdims=True)
    return _make(out, "sum_rows", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def square(a: Matrix) -> Matrix:
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def exp(a: Matrix) -> Matrix:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Matrix) -> Matrix:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def tanh(a: Matrix) -> Matrix:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a: Matrix) -> Matrix:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, "gelu", (a,), back)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op}: non-finite input")


def softmax_rows(m: Matrix) -> Matrix:
    _check_finite(m.data, "softmax_rows")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, "softmax", (m,), back)


def log_softmax_rows(m: Matrix) -> Matrix:
    _check_finite(m.data, "log_softmax_rows")
    z = m.data - m.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax", (m,), back)


def layer_norm(m: Matrix, gain: Matrix, bias: Matrix, eps: float = 1e-5) -> Matrix:
    if gain.shape != (1, m.cols) or bias.shape != (1, m.cols):
        raise DimensionError(f"layer_norm gain/bias must be 1x{m.cols}")
    x = m.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        n = x.shape[1]
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _make(out, "layer_norm", (m, gain, bias), back)


def gather_rows(m: Matrix, index: Sequence[int] | np.ndarray) -> Matrix:
    """Rows of ``m`` at ``index`` (repeats allowed); used for lookup and pruning."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= m.rows):
        raise IndexError(f"row index out of range for {m.rows} rows")
    out = m.data[idx]

    def back(g):
        full = np.zeros_like(m.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, "gather_rows", (m,), back)


def cross_entropy(logits: Matrix, labels: Sequence[int]) -> Matrix:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.rows,):
        raise DimensionError("one label per logits row required")
    logp = log_softmax_rows(logits)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(logits.rows), labels] = -1.0 / logits.rows
    return sum_all(mul(logp, constant(onehot)))


def multihead_attention(q: Matrix, k: Matrix, v: Matrix, heads: int, bias: np.ndarray | None = None) -> Matrix:
    """Scaled dot-product attention over ``heads`` column groups.

    ``bias`` is an additive t x t constant (0 for allowed pairs,
    ``MASK_PENALTY`` for disallowed ones); it carries no gradient.
    """
    t, d = q.shape
    if k.shape != (t, d) or v.shape != (t, d):
        raise DimensionError("q, k, v must share shape")
    if d % heads:
        raise DimensionError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    sc = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(t, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(t, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(t, heads, dh).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * q.data.dtype.type(sc)
    if bias is not None:
        s = s + bias.astype(s.dtype, copy=False)
    s = s - s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    out = (p @ vh).transpose(1, 0, 2).reshape(t, d)

    def back(g):
        gh = g.reshape(t, heads, dh).transpose(1, 0, 2)
        dv = p.transpose(0, 2, 1) @ gh
        dp = gh @ vh.transpose(0, 2, 1)
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * sc
        dq = ds @ kh
        dk = ds.transpose(0, 2, 1) @ qh
        merge = lambda x: x.transpose(1, 0, 2).reshape(t, d)
        return merge(dq), merge(dk), merge(dv)

    return _make(out, "mha", (q, k, v), back)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo(root: Matrix) -> list[Matrix]:
    order: list[Matrix] = []
    seen: set[int] = set()
    stack: list[tuple[Matrix, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Matrix) -> dict[Matrix, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a mapping from each such leaf to its accumulated gradient.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Matrix, np.ndarray] = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

_MAGIC = b"EATCKPT1"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a JSON header followed by little-endian float32 payloads in header order."""
    entries = []
    payloads = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape)})
        payloads.append(a.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    out: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return out, header["meta"]
