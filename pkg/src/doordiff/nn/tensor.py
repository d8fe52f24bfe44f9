"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each operation records its parents and a backward closure on the output
tensor; ``backward`` replays the closures in reverse topological order and
accumulates gradients on every tensor that requires them.  All math is done
in double precision so gradients can be validated against central finite
differences to tight tolerances.
"""

from __future__ import annotations

import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message carries both shapes."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (faster inference)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def accumulate_grad(self, g) -> None:
        if self.grad is None:
            g = np.asarray(g, dtype=np.float64)
            if g.shape == self.values.shape:
                # copy, never alias: the same g may reach several tensors
                self.grad = g.copy()
                return
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor with a stable name for checkpoints."""

    __slots__ = ("name",)

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate .grad on every reachable tensor with requires_grad set.

    ``loss`` must be scalar (size 1).  Gradients accumulate, so callers
    normally zero them between steps.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.values))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.values.shape} and {b.values.shape}") from e

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.values.shape))

    return _make(values, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.values, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.values.shape} and {b.values.shape}") from e

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.values, a.values.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.values, b.values.shape))

    return _make(values, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics on leading axes."""
    if a.values.ndim < 1 or b.values.ndim < 2:
        raise ShapeError(f"matmul: need >=1 and >=2 dims, got {a.values.shape} and {b.values.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.values.shape} @ {b.values.shape}")
    values = a.values @ b.values

    def backward_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.values, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.values.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.values, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.values.shape))

    return _make(values, (a, b), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    values = a.values.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.values.shape))

    return _make(values, (a,), backward_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    values = a.values.transpose(axes)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _make(values, (a,), backward_fn)


def concatenate(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t.accumulate_grad(piece)

    return _make(values, tuple(tensors), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    values = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            inner = (g * values).sum(axis=axis, keepdims=True)
            a.accumulate_grad(values * (g - inner))

    return _make(values, (a,), backward_fn)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mean = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    values = centered * inv_std

    def backward_fn(g):
        if a.requires_grad:
            g_mean = g.mean(axis=-1, keepdims=True)
            gy_mean = (g * values).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv_std * (g - g_mean - values * gy_mean))

    return _make(values, (a,), backward_fn)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    x = a.values
    inner = GELU_C * (x + GELU_A * (x * x * x))
    t = np.tanh(inner)
    values = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        if a.requires_grad:
            sech2 = 1.0 - t * t
            d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(values, (a,), backward_fn)


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    values = np.clip(a.values, low, high)
    mask = (a.values >= low) & (a.values <= high)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(values, (a,), backward_fn)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.values.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.values.shape).copy())

    return _make(values, (a,), backward_fn)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]
    values = a.values.mean(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g / count, a.values.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg / count, a.values.shape).copy())

    return _make(values, (a,), backward_fn)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"mse_loss: shapes differ, {a.values.shape} vs {b.values.shape}")
    diff = a.values - b.values
    n = diff.size
    values = np.asarray((diff * diff).sum() / n)

    def backward_fn(g):
        scale = 2.0 * float(g) / n
        if a.requires_grad:
            a.accumulate_grad(scale * diff)
        if b.requires_grad:
            b.accumulate_grad(-scale * diff)

    return _make(values, (a, b), backward_fn)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Temporal convolution with odd kernel and same padding.

    Args:
        x: input of shape (batch, time, c_in).
        w: kernel of shape (k, c_in, c_out), k odd.
        b: optional bias of shape (c_out,).
    """
    if x.values.ndim != 3 or w.values.ndim != 3:
        raise ShapeError(f"conv1d: need (B,T,C) and (K,Cin,Cout), got {x.values.shape} and {w.values.shape}")
    k, c_in, c_out = w.values.shape
    if k % 2 != 1:
        raise ShapeError(f"conv1d: kernel size must be odd, got {k}")
    if x.values.shape[-1] != c_in:
        raise ShapeError(f"conv1d: channel mismatch, input {x.values.shape} vs kernel {w.values.shape}")
    batch, time, _ = x.values.shape
    pad = k // 2
    xp = np.zeros((batch, time + 2 * pad, c_in))
    xp[:, pad : pad + time, :] = x.values
    # im2col: (B, T, K*Cin) then one GEMM against (K*Cin, Cout)
    cols = np.concatenate([xp[:, i : i + time, :] for i in range(k)], axis=-1)
    w_flat = w.values.reshape(k * c_in, c_out)
    values = cols.reshape(batch * time, k * c_in) @ w_flat
    values = values.reshape(batch, time, c_out)
    if b is not None:
        values = values + b.values

    def backward_fn(g):
        g2 = g.reshape(batch * time, c_out)
        if w.requires_grad:
            gw = cols.reshape(batch * time, k * c_in).T @ g2
            w.accumulate_grad(gw.reshape(k, c_in, c_out))
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ w_flat.T).reshape(batch, time, k * c_in)
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[:, i : i + time, :] += gcols[:, :, i * c_in : (i + 1) * c_in]
            x.accumulate_grad(gxp[:, pad : pad + time, :])

    parents = (x, w) if b is None else (x, w, b)
    return _make(values, parents, backward_fn)


def avg_pool_time(x: Tensor) -> Tensor:
    """Halve the time axis of a (B, T, C) tensor by averaging adjacent pairs."""
    batch, time, ch = x.values.shape
    if time % 2 != 0:
        raise ShapeError(f"avg_pool_time: time axis must be even, got shape {x.values.shape}")
    values = x.values.reshape(batch, time // 2, 2, ch).mean(axis=2)

    def backward_fn(g):
        if x.requires_grad:
            gx = np.repeat(g, 2, axis=1) * 0.5
            x.accumulate_grad(gx)

    return _make(values, (x,), backward_fn)


def repeat_time(x: Tensor) -> Tensor:
    """Double the time axis of a (B, T, C) tensor by nearest-neighbor repeat."""
    batch, time, ch = x.values.shape
    values = np.repeat(x.values, 2, axis=1)

    def backward_fn(g):
        if x.requires_grad:
            gx = g.reshape(batch, time, 2, ch).sum(axis=2)
            x.accumulate_grad(gx)

    return _make(values, (x,), backward_fn)
