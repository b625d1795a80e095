"""Transformer building blocks on top of `fewvlm.nncore.tensor`.

Blocks are pre-layer-norm: every sub-layer sees a normalized input and its
output is added back to the residual stream.
"""

from typing import Iterator

import numpy as np

from fewvlm.nncore.tensor import (
    Tensor,
    add,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    parameter,
)


class Module:
    """Container of named parameters and sub-modules"""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, list):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{k}.{i}", m

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Parameters keyed by dotted path, in construction order"""
        out: dict[str, Tensor] = {}
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                out[prefix + k] = v
        for k, child in self.children():
            out.update(child.named_parameters(prefix + k + "."))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.rng, self.training)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = parameter(rng.normal(0.0, in_dim**-0.5, size=(in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        super().__init__()
        self.weight = parameter(rng.normal(0.0, std, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        return embedding_lookup(self.weight, ids)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x_q: Tensor, x_kv: Tensor, mask: np.ndarray | None) -> Tensor:
        h = multi_head_attention(self.wq(x_q), self.wk(x_kv), self.wv(x_kv), mask, self.n_heads)
        return self.wo(h)


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rate: float, rng: np.random.Generator):
        super().__init__()
        self.fc_in = Linear(dim, ff_dim, rng)
        self.fc_out = Linear(ff_dim, dim, rng)
        self.drop = Dropout(rate)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc_out(self.drop(gelu(self.fc_in(x))))


class EncoderLayer(Module):
    def __init__(self, dim: int, ff_dim: int, n_heads: int, rate: float, rng: np.random.Generator):
        super().__init__()
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rate, rng)
        self.drop = Dropout(rate)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln_attn(x)
        x = add(x, self.drop(self.attn(h, h, mask)))
        return add(x, self.drop(self.ff(self.ln_ff(x))))


class DecoderLayer(Module):
    def __init__(self, dim: int, ff_dim: int, n_heads: int, rate: float, rng: np.random.Generator):
        super().__init__()
        self.ln_self = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rate, rng)
        self.drop = Dropout(rate)

    def __call__(
        self, y: Tensor, memory: Tensor, self_mask: np.ndarray, memory_mask: np.ndarray
    ) -> Tensor:
        h = self.ln_self(y)
        y = add(y, self.drop(self.self_attn(h, h, self_mask)))
        y = add(y, self.drop(self.cross_attn(self.ln_cross(y), memory, memory_mask)))
        return add(y, self.drop(self.ff(self.ln_ff(y))))


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))
