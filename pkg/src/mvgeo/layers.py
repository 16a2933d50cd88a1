"""Parameter containers and transformer building blocks on top of ``tensor``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, conv2d, layernorm, matmul, softmax

NEG_INF = -1e9


class Module:
    """Parameter tree walked in attribute-insertion order.

    Any attribute that is a gradient-requiring :class:`Tensor`, a ``Module`` or
    a list of modules is part of the tree; plain arrays are constants.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True, scale: float = 1.0):
        limit = scale * np.sqrt(6.0 / (n_in + n_out))
        self.weight = param(rng.uniform(-limit, limit, (n_in, n_out)), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32):
        self.gain = param(np.ones(d), dtype)
        self.bias = param(np.zeros(d), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float32,
                 scale: float = 1.0):
        fan_in = c_in * k * k
        self.weight = param(rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), (c_out, c_in, k, k)), dtype)
        self.bias = param(np.zeros(c_out), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


class Attention(Module):
    """Multi-head self-attention with LayerNorm on per-head queries and keys."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 qk_norm: bool = True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng, dtype)
        self.q_norm = LayerNorm(self.head_dim, dtype) if qk_norm else None
        self.k_norm = LayerNorm(self.head_dim, dtype) if qk_norm else None
        self.proj = Linear(dim, dim, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, logit_bias: np.ndarray | None = None) -> Tensor:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, heads, T, hd)
        if self.q_norm is not None:
            q = self.q_norm(q)
            k = self.k_norm(k)
        logits = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.head_dim))
        if logit_bias is not None:
            logits = logits + Tensor(logit_bias.astype(logits.dtype))
        w = softmax(logits, axis=-1)
        self.last_weights = w.data
        out = matmul(w, v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class Block(Module):
    """Pre-norm attention + MLP, each residual gated by a LayerScale vector."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32,
                 mlp_ratio: float = 4.0, layerscale_init: float = 0.01, qk_norm: bool = True):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype, qk_norm=qk_norm)
        self.ls1 = param(np.full(dim, layerscale_init), dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), rng, dtype)
        self.ls2 = param(np.full(dim, layerscale_init), dtype)

    def __call__(self, x: Tensor, logit_bias: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), logit_bias) * self.ls1
        return x + self.mlp(self.norm2(x)) * self.ls2
