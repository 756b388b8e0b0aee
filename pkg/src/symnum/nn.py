"""Transformer building blocks on top of :mod:`symnum.tensorcore`."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

NEG_INF = -1e9


class Module:
    """Parameter container. Parameters and sub-modules are discovered from
    instance attributes (in assignment order), including lists of modules."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = [k for k in params if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in params.items():
            if k in arrays:
                value = np.asarray(arrays[k])
                if value.shape != p.shape:
                    raise ValueError(f"{k}: shape {value.shape} != {p.shape}")
                p.data = value.astype(p.data.dtype).copy()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = tc.parameter(rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
        self.bias = tc.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tc.matmul(x, self.weight)
        return tc.add(out, self.bias) if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = tc.parameter(np.ones(d))
        self.beta = tc.parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float | None = None):
        std = 1.0 / math.sqrt(d) if std is None else std
        self.table = tc.parameter(rng.standard_normal((n, d)) * std)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return tc.embedding_lookup(self.table, ids)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"d_emb={d} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is additive and broadcastable to (B, heads, Tq, Tk)."""
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.n_heads
        dh = d // h
        q = tc.transpose(tc.reshape(self.q(xq), (b, tq, h, dh)), (0, 2, 1, 3))
        kt = tc.transpose(tc.reshape(self.k(xkv), (b, tk, h, dh)), (0, 2, 3, 1))
        v = tc.transpose(tc.reshape(self.v(xkv), (b, tk, h, dh)), (0, 2, 1, 3))
        scores = tc.scale(tc.matmul(q, kt), 1.0 / math.sqrt(dh))
        attn = tc.softmax(scores, mask)
        ctx = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (b, tq, d))
        return self.o(ctx)


class EncoderBlock(Module):
    """Pre-layer-norm transformer encoder layer."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = tc.add(x, self.attn(h, h, mask))
        return tc.add(x, self.ffn(self.ln2(x)))


class DecoderBlock(Module):
    """Pre-layer-norm decoder layer: causal self-attention, cross-attention
    over a memory sequence, feed-forward."""

    def __init__(self, d: int, n_heads: int, ffn_mult: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng)
        self.ln3 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, rng)

    def __call__(self, x: Tensor, memory: Tensor, self_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = tc.add(x, self.self_attn(h, h, self_mask))
        x = tc.add(x, self.cross_attn(self.ln2(x), memory))
        return tc.add(x, self.ffn(self.ln3(x)))


def key_padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, T) boolean validity -> additive mask of shape (B, 1, 1, T)."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, NEG_INF)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), NEG_INF), k=1)[None, None, :, :]
