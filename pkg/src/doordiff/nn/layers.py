"""Neural layers assembled from the autodiff primitives."""

from __future__ import annotations

import math

import numpy as np

from doordiff.nn import tensor as T
from doordiff.nn.tensor import Parameter, ShapeError, Tensor


class Module:
    """Base class with recursive parameter discovery over attributes."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        self._collect(out, seen)
        return out

    def _collect(self, out: list[Parameter], seen: set[int]) -> None:
        for value in vars(self).values():
            _collect_value(value, out, seen)


def _collect_value(value, out: list[Parameter], seen: set[int]) -> None:
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            out.append(value)
    elif isinstance(value, Module):
        value._collect(out, seen)
    elif isinstance(value, (list, tuple)):
        for item in value:
            _collect_value(item, out, seen)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            w = fan_in_uniform(rng, (in_dim, out_dim), in_dim)
            b = fan_in_uniform(rng, (out_dim,), in_dim)
        self.w = Parameter(w, name=f"{name}.w")
        self.b = Parameter(b, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)


class Conv1d(Module):
    """Kernel-3 same-padding temporal convolution over (B, T, C) tensors."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, name: str,
                 kernel: int = 3, zero_init: bool = False):
        fan_in = kernel * in_ch
        if zero_init:
            w = np.zeros((kernel, in_ch, out_ch))
            b = np.zeros(out_ch)
        else:
            w = fan_in_uniform(rng, (kernel, in_ch, out_ch), fan_in)
            b = fan_in_uniform(rng, (out_ch,), fan_in)
        self.w = Parameter(w, name=f"{name}.w")
        self.b = Parameter(b, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.w, self.b)


class LayerNorm(Module):
    """Last-axis layer normalization with learned gain and bias."""

    def __init__(self, dim: int, name: str):
        self.gain = Parameter(np.ones(dim), name=f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x), self.gain), self.bias)


class ResBlock(Module):
    """Two temporal convolutions with layer norm, gelu, and a skip connection."""

    def __init__(self, dim: int, rng: np.random.Generator, name: str):
        self.conv1 = Conv1d(dim, dim, rng, name=f"{name}.conv1")
        self.norm1 = LayerNorm(dim, name=f"{name}.norm1")
        self.conv2 = Conv1d(dim, dim, rng, name=f"{name}.conv2")
        self.norm2 = LayerNorm(dim, name=f"{name}.norm2")

    def __call__(self, x: Tensor) -> Tensor:
        h = T.gelu(self.norm1(self.conv1(x)))
        h = T.gelu(self.norm2(self.conv2(h)))
        return T.add(x, h)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, c = x.shape
    x = T.reshape(x, (b, t, heads, c // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, h * d))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    d = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    scores = T.mul(scores, Tensor(1.0 / math.sqrt(d)))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v)


class SelfAttention(Module):
    """Multi-head self-attention over the time axis, applied residually.

    The output projection starts at zero so a fresh block is the identity.
    There is no positional term: the block is permutation-equivariant and
    leaves temporal ordering to the convolutions around it.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str):
        if dim % heads != 0:
            raise ShapeError(f"attention dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, name=f"{name}.q")
        self.k = Linear(dim, dim, rng, name=f"{name}.k")
        self.v = Linear(dim, dim, rng, name=f"{name}.v")
        self.out = Linear(dim, dim, rng, name=f"{name}.out", zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(x), self.heads)
        v = _split_heads(self.v(x), self.heads)
        attended = _merge_heads(_attend(q, k, v))
        return T.add(x, self.out(attended))


class CrossAttention(Module):
    """Multi-head cross-attention from a (B, T, C) query sequence onto a
    (B, N, ctx) context sequence.  Returns the attended update WITHOUT the
    residual add; callers decide how to merge it.  Output projection starts
    at zero, so the update is exactly zero at initialization."""

    def __init__(self, dim: int, ctx_dim: int, heads: int, rng: np.random.Generator, name: str):
        if dim % heads != 0:
            raise ShapeError(f"attention dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, name=f"{name}.q")
        self.k = Linear(ctx_dim, dim, rng, name=f"{name}.k")
        self.v = Linear(ctx_dim, dim, rng, name=f"{name}.v")
        self.out = Linear(dim, dim, rng, name=f"{name}.out", zero_init=True)

    def __call__(self, x: Tensor, context: Tensor) -> Tensor:
        q = _split_heads(self.q(x), self.heads)
        k = _split_heads(self.k(context), self.heads)
        v = _split_heads(self.v(context), self.heads)
        attended = _merge_heads(_attend(q, k, v))
        return self.out(attended)


class MLP(Module):
    """Gelu MLP over the last axis; optional zero-initialized final layer."""

    def __init__(self, dims: list[int], rng: np.random.Generator, name: str,
                 zero_final: bool = False):
        self.layers = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            self.layers.append(
                Linear(dims[i], dims[i + 1], rng, name=f"{name}.{i}",
                       zero_init=zero_final and last)
            )

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x
