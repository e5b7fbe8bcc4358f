"""Reverse-mode automatic differentiation on float32 numpy arrays.

A ``Tensor`` wraps an ``np.float32`` array. Differentiable operations
build a graph of closures; ``Tensor.backward`` visits that graph once in
reverse topological order and accumulates gradients into ``Tensor.grad``.
Gradients accumulate across calls until cleared, which callers rely on
for re-entrant checks; optimizers reset them explicitly.

All arithmetic stays in 32-bit floats. The only 64-bit arithmetic in the
package lives inside ``finite_diff_check``, which forms central
difference quotients in float64 from pairs of float32 forward passes.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "AttentionParams", "no_grad", "accumulate_grad",
    "matmul", "softmax", "layer_norm", "linear", "multi_head_attention",
    "relu", "exp", "log", "sigmoid", "softplus", "gelu", "clamp",
    "concat", "take_rows", "finite_diff_check",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the context (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable[[np.ndarray], None] | None = None, name: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph mechanics ----------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph.

        Raises ContractError when called on a non-scalar tensor. Each graph
        node is visited exactly once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar output, got shape {self.data.shape}")
        order: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, iter]] = [(self, iter(self._parents))]
        while stack:
            node, parents = stack[-1]
            pushed = False
            for p in parents:
                if p.requires_grad and id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    pushed = True
                    break
            if not pushed:
                order.append(node)
                stack.pop()
        accumulate_grad(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad`` (allocating on first use)."""
    g = np.asarray(g, dtype=np.float32)
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create a graph node, or a constant when gradients are off/unneeded."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def pow_scalar(x: Tensor, p: float) -> Tensor:
    x = _wrap(x)
    p = float(p)
    out_data = x.data ** np.float32(p)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * np.float32(p) * x.data ** np.float32(p - 1.0))

    return _make(out_data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * (x.data > 0.0))

    return _make(out_data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * out_data)

    return _make(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g / x.data)

    return _make(out_data, (x,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(np.float32)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = _sigmoid_np(x.data)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.logaddexp(np.float32(0.0), x.data)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g * _sigmoid_np(x.data))

    return _make(out_data, (x,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh form.

    Composed from primitives that already carry exact backward closures,
    so the gradient needs no separate derivation. Smooth everywhere,
    which keeps finite-difference checks of networks built on it clean.
    """
    inner = x + (x ** 3.0) * 0.044715
    t = sigmoid(inner * (2.0 * _GELU_C)) * 2.0 - 1.0  # tanh(_GELU_C * inner)
    return x * (t + 1.0) * 0.5


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through inside the interval."""
    x = _wrap(x)
    out_data = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            inside = (x.data >= lo) & (x.data <= hi)
            accumulate_grad(x, g * inside)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            accumulate_grad(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            accumulate_grad(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axis_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    axes = _axis_tuple(axis, x.data.ndim)
    out_data = x.data.sum(axis=axes or None, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, _expand_reduced(g, x.data.shape, axes, keepdims))

    return _make(out_data, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out_data = x.data.mean(axis=axes or None, keepdims=keepdims, dtype=np.float32)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(
                x, _expand_reduced(g, x.data.shape, axes, keepdims) / np.float32(count))

    return _make(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.data.ndim)))
    out_data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            accumulate_grad(x, np.transpose(g, inverse))

    return _make(out_data, (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, 0)
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                accumulate_grad(part, np.moveaxis(moved[start:stop], 0, axis))

    return _make(out_data, tuple(parts), backward)


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows (axis 0) by an integer index array; repeats accumulate."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx, g)
            accumulate_grad(x, buf)

    return _make(out_data, (x,), backward)


def _slice(x: Tensor, key) -> Tensor:
    x = _wrap(x)
    out_data = x.data[key]

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[key] += g
            accumulate_grad(x, buf)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and attention


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            accumulate_grad(x, out_data * (g - inner))

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, float(eps)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head attention operation."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo]


def multi_head_attention(q_tokens: Tensor, kv_tokens: Tensor,
                         params: AttentionParams, heads: int) -> Tensor:
    """Scaled dot-product attention with per-head splits of the channel axis.

    ``q_tokens`` is (n_q, C) and ``kv_tokens`` is (n_kv, C); the result is
    (n_q, C). Scores are scaled by 1/sqrt(head_dim) before the softmax.
    """
    n_q, c = q_tokens.shape
    n_kv = kv_tokens.shape[0]
    if c % heads != 0:
        raise DimensionError(f"channels {c} not divisible by heads {heads}")
    hd = c // heads
    q = linear(q_tokens, params.wq, params.bq)
    k = linear(kv_tokens, params.wk, params.bk)
    v = linear(kv_tokens, params.wv, params.bv)
    q3 = transpose(reshape(q, (n_q, heads, hd)), (1, 0, 2))
    k3 = transpose(reshape(k, (n_kv, heads, hd)), (1, 2, 0))
    v3 = transpose(reshape(v, (n_kv, heads, hd)), (1, 0, 2))
    scores = mul(matmul(q3, k3), 1.0 / math.sqrt(hd))
    weights = softmax(scores, axis=-1)
    mixed = matmul(weights, v3)
    merged = reshape(transpose(mixed, (1, 0, 2)), (n_q, c))
    return linear(merged, params.wo, params.bo)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-3, n_probes: int = 100, seed: int = 0) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its forward pass on every call and return a scalar
    Tensor. For each parameter, up to ``n_probes`` distinct coordinates are
    probed (all of them when the tensor is smaller). The returned value is
    the maximum over probes of ``|analytic - central| / max(1, |central|)``.
    Difference quotients are accumulated in float64 using the actually
    realized float32 perturbation.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError("finite_diff_check requires a scalar objective")
    out.backward()
    analytic = [np.zeros(p.data.shape, dtype=np.float64) if p.grad is None
                else np.asarray(p.grad, dtype=np.float64) for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= n_probes else rng.choice(n, size=n_probes, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = np.float32(orig + h)
            hi = float(flat[i])
            with no_grad():
                f_hi = float(f().data)
            flat[i] = np.float32(orig - h)
            lo = float(flat[i])
            with no_grad():
                f_lo = float(f().data)
            flat[i] = orig
            central = (f_hi - f_lo) / (hi - lo)
            err = abs(float(gflat[i]) - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
