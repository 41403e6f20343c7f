"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op whose inputs carry gradients records its parents
and a local vector-Jacobian rule on the output tensor.  ``Graph``
linearizes the DAG reachable from one output into a topological tape;
the backward sweep visits each record exactly once.

Only what the attention network needs lives here: matrix multiply with
stacked leading batch dimensions, broadcast elementwise arithmetic, row
softmax, layer normalization, ReLU, sigmoid/softplus, concatenation and
slicing along the last axis, reshapes, and full reductions.  Everything
is float64 so gradient checks are reproducible.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Disable graph recording inside a ``with`` block (per thread)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-d float64 array, optionally a node in a backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run the backward sweep from this tensor.

        ``seed`` defaults to all-ones of the output shape.
        """
        Graph(self).backward(np.ones_like(self.data) if seed is None else seed)

    def grad_or_zero(self) -> np.ndarray:
        """Gradient of the last backward pass; zeros if untouched."""
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def _from_op(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Build an op output, recording it when a parent carries gradient."""
    out = Tensor(data)
    if is_grad_enabled() and any(_needs_grad(p) for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast elementwise gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduce_batch(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum broadcast *batch* dims of a matmul gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(g, b.data.shape) if nb else None,
        )

    return _from_op(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if na else None,
            _unbroadcast(-g, b.data.shape) if nb else None,
        )

    return _from_op(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na, nb = _needs_grad(a), _needs_grad(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if na else None,
            _unbroadcast(g * a.data, b.data.shape) if nb else None,
        )

    return _from_op(a.data * b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} x {b.shape}") from exc
    na, nb = _needs_grad(a), _needs_grad(b)

    def vjp(g):
        ga = gb = None
        if na:
            ga = _reduce_batch(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if nb:
            gb = _reduce_batch(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _from_op(out, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _from_op(np.where(mask, x.data, 0.0), (x,), vjp)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)

    def vjp(g):
        return (g * s * (1.0 - s),)

    return _from_op(s, (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (g * _sigmoid(x.data),)

    return _from_op(np.logaddexp(0.0, x.data), (x,), vjp)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _from_op(s, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean, unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs row width >= 2, got {x.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    nx, ng, nb = _needs_grad(x), _needs_grad(gain), _needs_grad(bias)

    def vjp(g):
        gx = gg = gb = None
        if nx:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - y * (gh * y).mean(axis=-1, keepdims=True))
        if ng:
            gg = _unbroadcast(g * y, gain.data.shape)
        if nb:
            gb = _unbroadcast(g, bias.data.shape)
        return gx, gg, gb

    return _from_op(y * gain.data + bias.data, (x, gain, bias), vjp)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    ts = [as_tensor(t) for t in tensors]
    widths = [t.shape[-1] for t in ts]
    needs = [_needs_grad(t) for t in ts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[..., edges[i]:edges[i + 1]] if needs[i] else None for i in range(len(ts))
        )

    return _from_op(np.concatenate([t.data for t in ts], axis=-1), ts, vjp)


def narrow_last(x, start: int, size: int) -> Tensor:
    """Slice ``size`` columns of the last axis starting at ``start``."""
    x = as_tensor(x)
    if start < 0 or start + size > x.shape[-1]:
        raise ShapeError(f"narrow [{start}:{start + size}] outside last extent {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:start + size] = g
        return (gx,)

    return _from_op(x.data[..., start:start + size].copy(), (x,), vjp)


def transpose_last(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose_last needs >= 2 dims, got {x.shape}")

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(np.swapaxes(x.data, -1, -2), (x,), vjp)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    orig = x.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _from_op(x.data.reshape(shape), (x,), vjp)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _from_op(np.asarray(x.data.sum()), (x,), vjp)


def sum_last(x) -> Tensor:
    """Sum along the last axis (row-local, so batch-size invariant)."""
    x = as_tensor(x)
    n = x.shape[-1]

    def vjp(g):
        return (np.repeat(g[..., None], n, axis=-1),)

    return _from_op(x.data.sum(axis=-1), (x,), vjp)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    n = x.data.size

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _from_op(np.asarray(x.data.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# backward


class Graph:
    """Topologically ordered tape of the ops reachable from one output.

    ``records`` lists every non-leaf tensor with parents strictly before
    consumers, so the reversed sweep visits each record exactly once with
    its output gradient fully accumulated.
    """

    def __init__(self, output: Tensor):
        if output._vjp is None:
            raise RuntimeError(
                "backward before forward: tensor is not the output of a recorded op"
            )
        self.output = output
        records: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, done = stack.pop()
            if done:
                records.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._vjp is None:
                leaves.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.records = records
        self.leaves = leaves

    def backward(self, seed: np.ndarray) -> None:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != self.output.data.shape:
            raise ShapeError(
                f"seed shape {seed.shape} != output shape {self.output.data.shape}"
            )
        for t in self.records:
            t.grad = None
        for t in self.leaves:
            t.grad = None
        self.output.grad = seed
        for t in reversed(self.records):
            g = t.grad
            if g is None:
                continue
            for p, pg in zip(t._parents, t._vjp(g)):
                if pg is None or not _needs_grad(p):
                    continue
                p.grad = pg if p.grad is None else p.grad + pg


def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences.

    ``f`` maps ``x`` to a scalar Tensor and must be pure.  The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per element.
    """
    if not x.requires_grad:
        raise ValueError("finite_diff_check needs a requires_grad tensor")
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"f must return a scalar, got shape {out.data.shape}")
    out.backward(np.ones_like(out.data))
    analytic = x.grad_or_zero().reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(x).data)
            flat[i] = orig - step
            fm = float(f(x).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            err = abs(analytic[i] - numeric) / denom
            if err > worst:
                worst = err
    return worst
