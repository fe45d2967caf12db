"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; collects trainable tensors by attribute introspection."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def widen_weights(module: "Module", rng: np.random.Generator, std: float = 0.25) -> None:
    """Re-draw all projection matrices at a larger scale.

    The training init (std 0.02) puts attention scores so close to uniform
    that key/query gradients sit at the 1e-8 scale, where central differences
    are pure roundoff.  Finite-difference checks run at a better-conditioned
    random point instead; the differentiation rules do not depend on it.
    """
    for name, p in module.named_parameters():
        if name.endswith(".w"):
            p.data = rng.normal(0.0, std, size=p.data.shape)


class Linear(Module):
    """Dense projection ``x @ w (+ b)``; weight shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = False, std: float = 0.02):
        self.w = init_normal(rng, (d_in, d_out), std)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(S, D) -> (H, S, D/H)."""
    s, d = x.shape
    return T.transpose(T.reshape(x, (s, heads, d // heads)), (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    """(H, S, d) -> (S, H*d)."""
    h, s, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (s, h * d))


class SelfAttention(Module):
    """Standard multi-head self-attention over a (S, D) sequence, no biases."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError("dimension mismatch: dim must divide by heads")
        self.w_q = Linear(dim, dim, rng)
        self.w_k = Linear(dim, dim, rng)
        self.w_v = Linear(dim, dim, rng)
        self.w_o = Linear(dim, dim, rng)
        self.heads = heads
        self.head_dim = dim // heads

    def __call__(self, x: Tensor) -> Tensor:
        q = split_heads(self.w_q(x), self.heads)
        k = split_heads(self.w_k(x), self.heads)
        v = split_heads(self.w_v(x), self.heads)
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(self.head_dim))
        attn = T.softmax_stable(scores, axis=-1)
        return self.w_o(merge_heads(T.matmul(attn, v)))


class Mlp(Module):
    """Two dense layers around a GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: int | None = None):
        self.fc1 = Linear(dim, hidden, rng, bias=True)
        self.fc2 = Linear(hidden, out_dim if out_dim is not None else dim, rng, bias=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
