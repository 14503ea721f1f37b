"""Dense float64 tensor substrate with reverse-mode autodiff and FLOP instrumentation.

Tensors wrap C-contiguous float64 numpy buffers and record a tape of the
operations that produced them, so ``backward()`` on a scalar propagates exact
reverse-mode gradients to every parameter leaf. Matrix products are the only
instrumented operation: inside a ``count_flops()`` context every ``matmul``
adds 2*M*K*N to the active counter (multiply-add counted as 2 FLOPs), keyed by
an optional tag. Backward-pass arithmetic runs on raw numpy and is never
counted, so a counter wrapped around a forward pass measures exactly the
forward matmuls.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Rng",
    "FlopCounter",
    "count_flops",
    "tensor",
    "zeros",
    "matmul",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "concat_rows",
    "concat_cols",
    "slice_rows",
]

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Per-evaluation-context accumulator of matmul FLOPs (multiply-add = 2)."""

    total: int = 0
    by_tag: dict[str, int] = field(default_factory=dict)

    def add(self, flops: int, tag: str) -> None:
        self.total += flops
        self.by_tag[tag] = self.by_tag.get(tag, 0) + flops


_active_counter: ContextVar[FlopCounter | None] = ContextVar("locomt_flops", default=None)


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Activate a fresh FlopCounter for the duration of the block.

    Counters nest by shadowing: only the innermost context accumulates.
    Distinct contexts (threads, tasks) get independent counters.
    """
    counter = FlopCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _record_flops(flops: int, tag: str) -> None:
    counter = _active_counter.get()
    if counter is not None:
        counter.add(flops, tag)


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Shape-carrying float64 array node on the autodiff tape.

    ``data`` is always a C-contiguous float64 ndarray; ``grad`` is filled in
    (same shape) by ``backward()``. Non-leaf tensors keep references to their
    parents and a closure that maps the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None,
    ):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward_fn = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of self w.r.t. every reachable requires_grad leaf."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without seed needs a scalar, got shape {self.shape}")
            seed = np.ones_like(self.data)
        # iterative topological order over the requires_grad subgraph
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ascontiguousarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (row-vector and scalar cases)."""
    if grad.shape == shape:
        return grad
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Instrumented matrix product of 2-D tensors; adds 2*M*K*N to the active counter."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    m, k = a.data.shape
    n = b.data.shape[1]
    _record_flops(2 * m * k * n, tag)
    out_data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(out_data, parents=(a, b), backward_fn=backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return Tensor(a.data.T, parents=(a,), backward_fn=backward)


def softmax_rows(a: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the allowed key set.

    Disallowed positions come out exactly 0; a row with no allowed position is
    all-zero rather than an error. Stabilized by subtracting the row max over
    the allowed entries.
    """
    a = _as_tensor(a)
    scores = a.data
    if scores.ndim != 2:
        raise ValueError(f"softmax_rows needs a 2-D tensor, got shape {scores.shape}")
    if allowed is None:
        mask = np.ones(scores.shape, dtype=bool)
    else:
        mask = np.asarray(allowed, dtype=bool)
        if mask.shape != scores.shape:
            raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    neg_inf = np.where(mask, scores, -np.inf)
    row_has_any = mask.any(axis=1)
    row_max = np.where(row_has_any, neg_inf.max(axis=1, initial=-np.inf), 0.0)
    shifted = np.where(mask, scores - row_max[:, None], -np.inf)
    exps = np.exp(shifted)  # exactly 0 at disallowed positions
    denom = exps.sum(axis=1, keepdims=True)
    out_data = exps / np.where(denom == 0.0, 1.0, denom)

    def backward(g):
        # d s_j = y_j * (g_j - sum_k g_k y_k) over the allowed set; zero elsewhere
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return (out_data * (g - dot),)

    return Tensor(out_data, parents=(a,), backward_fn=backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization: (x - mean) / sqrt(var + eps) * gain + bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        n = x.data.shape[1]
        dxhat = g * gain.data
        dg = (g * xhat).sum(axis=0)
        db = g.sum(axis=0)
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True) / n)
        return dx, _unbroadcast(dg, gain.data.shape), _unbroadcast(db, bias.data.shape)

    return Tensor(out_data, parents=(x, gain, bias), backward_fn=backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return Tensor(out_data, parents=(x,), backward_fn=backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=0)

    def backward(g):
        grads, start = [], 0
        for size in sizes:
            grads.append(g[start:start + size])
            start += size
        return tuple(grads)

    return Tensor(out_data, parents=tuple(parts), backward_fn=backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        grads, start = [], 0
        for size in sizes:
            grads.append(np.ascontiguousarray(g[:, start:start + size]))
            start += size
        return tuple(grads)

    return Tensor(out_data, parents=tuple(parts), backward_fn=backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise IndexError(f"row slice [{start}:{stop}] out of range for shape {a.data.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return Tensor(a.data[start:stop].copy(), parents=(a,), backward_fn=backward)


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------


class Rng:
    """Counter-based SplitMix64 generator, identical sequence for a given seed.

    Uniform doubles take the top 53 bits of each 64-bit output; normal draws
    use the Box-Muller transform of consecutive uniform pairs.
    """

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def _raw_block(self, count: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = self.seed + idx * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))

    def _next_u64(self) -> int:
        return int(self._raw_block(1)[0])

    def uniform(self, count: int) -> np.ndarray:
        """count doubles in [0, 1)."""
        return (self._raw_block(count) >> np.uint64(11)) * 2.0 ** -53

    def normal(self, shape: Sequence[int], std: float = 1.0) -> Tensor:
        """Tensor of the given shape with N(0, std^2) entries."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = (self._raw_block(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * 2.0 ** -53  # (0, 1], keeps log finite
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        draws = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return Tensor((std * draws).reshape(shape))

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive, rejection-sampled (no modulo bias)."""
        if lo > hi:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        limit = ((1 << 64) // span) * span
        while True:
            u = self._next_u64()
            if u < limit:
                return lo + (u % span)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]


def rand_normal(rng: Rng, shape: Sequence[int], std: float = 1.0) -> Tensor:
    return rng.normal(shape, std=std)


def rand_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    return rng.randint(lo, hi)
