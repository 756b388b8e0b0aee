"""Numeric and symbolic transformer encoders with attention pooling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .nn import EncoderBlock, Embedding, LayerNorm, Linear, Module, key_padding_mask, NEG_INF
from .numgen import NumericDataset
from .tensorcore import Tensor
from .tokens import NUMERIC_VOCAB, VOCAB, EncodeError, Vocabulary


@dataclass
class EncoderConfig:
    d_emb: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_symbolic_len: int = 64  # includes BOS/EOS
    max_dim: int = 10
    max_points: int = 512
    numeric_vocab_size: int = field(default=len(NUMERIC_VOCAB))
    symbolic_vocab_size: int = field(default=len(VOCAB))

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ValueError("d_emb must be divisible by n_heads")
        if self.max_symbolic_len < 3:
            raise ValueError("max_symbolic_len must leave room for BOS/EOS")

    def to_dict(self) -> dict:
        return asdict(self)


def float_feature_init(table: np.ndarray, offset: int, values: np.ndarray, scale: float, max_freq: float = 30.0) -> None:
    """Overwrite rows ``offset..offset+len(values)`` with smooth features of
    ``values``: one linear channel plus sinusoids of increasing frequency."""
    d = table.shape[1]
    half = (d - 1) // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))
    phase = np.outer(values, freqs)
    feats = np.concatenate([values[:, None], np.sin(phase), np.cos(phase)], axis=1)
    if feats.shape[1] < d:
        feats = np.concatenate([feats, np.zeros((len(values), d - feats.shape[1]))], axis=1)
    table[offset : offset + len(values)] = feats * scale / math.sqrt(half)


def init_float_rows(table: Tensor, mantissa_offset: int, n_mantissa: int, exponent_offset: int, n_exponent: int) -> None:
    """Give mantissa and exponent tokens features of log10|value|.

    A float is ``mantissa * 10**exponent``, so log-magnitude is the sum of a
    mantissa part and an exponent part and both start out linearly readable.
    """
    scale = float(np.std(table.data)) * math.sqrt(table.shape[1])
    data = table.data.astype(np.float64)
    log_m = np.log10(np.maximum(np.arange(n_mantissa), 1)) / 4.0
    float_feature_init(data, mantissa_offset, log_m, scale)
    float_feature_init(data, exponent_offset, (np.arange(n_exponent) - n_exponent // 2) / 100.0, scale)
    table.data = data.astype(table.dtype)


def attention_pool(h: Tensor, w_a: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Pool (B, T, d) rows into (B, d) with weights softmax(h . w_a) over T."""
    b, t, d = h.shape
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if not valid.any(axis=1).all():
            raise ValueError("attention_pool: a sequence has every position masked")
        mask = np.where(valid, 0.0, NEG_INF)
    else:
        mask = None
    logits = tc.reshape(tc.matmul(h, tc.reshape(w_a, (d, 1))), (b, t))
    weights = tc.softmax(logits, mask)
    pooled = tc.matmul(tc.reshape(weights, (b, 1, t)), h)
    return tc.reshape(pooled, (b, d))


def pool_weights(h: np.ndarray, w_a: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """The attention weights used by :func:`attention_pool` (for inspection)."""
    logits = h @ w_a
    if valid is not None:
        logits = np.where(valid, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


class NumericEncoder(Module):
    """Per-point token-triplet embedder -> transformer without positions -> pooling."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_emb
        self.cfg = cfg
        self.embed = Embedding(cfg.numeric_vocab_size, d, rng)
        init_float_rows(self.embed.table, NUMERIC_VOCAB.mantissa_offset, 10_000, NUMERIC_VOCAB.exponent_offset, 201)
        slots = 3 * (cfg.max_dim + 1)
        self.fc1 = Linear(slots * d, cfg.ffn_mult * d, rng)
        self.fc2 = Linear(cfg.ffn_mult * d, d, rng)
        self.blocks = [EncoderBlock(d, cfg.n_heads, cfg.ffn_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.w_a = tc.parameter(np.zeros(d))

    def hidden(self, tokens: np.ndarray) -> Tensor:
        """Final-layer point representations, shape (B, N, d)."""
        b, n, s = tokens.shape
        d = self.cfg.d_emb
        e = tc.reshape(self.embed(tokens), (b, n, s * d))
        x = self.fc2(tc.relu(self.fc1(e)))
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def __call__(self, tokens: np.ndarray) -> Tensor:
        return attention_pool(self.hidden(tokens), self.w_a)


class SymbolicEncoder(Module):
    """Token + learned positional embeddings -> masked transformer -> pooling."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, vocab: Vocabulary = VOCAB):
        d = cfg.d_emb
        self.cfg = cfg
        self.embed = Embedding(cfg.symbolic_vocab_size, d, rng)
        init_float_rows(self.embed.table, vocab.mantissa_offset, vocab.n_mantissa, vocab.exponent_offset, vocab.n_exponent)
        self.pos = Embedding(cfg.max_symbolic_len, d, rng)
        self.blocks = [EncoderBlock(d, cfg.n_heads, cfg.ffn_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.w_a = tc.parameter(np.zeros(d))

    def hidden(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        b, t = ids.shape
        if t > self.cfg.max_symbolic_len:
            raise ValueError(f"sequence length {t} exceeds max_symbolic_len={self.cfg.max_symbolic_len}")
        positions = np.broadcast_to(np.arange(t), (b, t))
        x = tc.add(self.embed(ids), self.pos(positions))
        mask = key_padding_mask(valid)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)

    def __call__(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        return attention_pool(self.hidden(ids, valid), self.w_a, valid)


class DualEncoder(Module):
    """The pair of encoders trained together; parameter names are
    ``enc_v.*`` (numeric) and ``enc_s.*`` (symbolic)."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.enc_v = NumericEncoder(cfg, rng)
        self.enc_s = SymbolicEncoder(cfg, rng)


# --------------------------------------------------------------------------- input preparation


def numeric_tokens(ds: NumericDataset, max_dim: int) -> np.ndarray:
    """Token ids of shape (N, 3 * (max_dim + 1)): x_0..x_{D-1} in fixed slots,
    padding for absent dimensions, y in the last slot."""
    if ds.dim > max_dim:
        raise ValueError(f"dataset dimension {ds.dim} exceeds the encoder's max_dim={max_dim}")
    n = ds.n
    out = np.full((n, max_dim + 1, 3), NUMERIC_VOCAB.pad_id, dtype=np.int64)
    out[:, : ds.dim, :] = NUMERIC_VOCAB.encode_values(ds.x)
    out[:, max_dim, :] = NUMERIC_VOCAB.encode_values(ds.y)
    return out.reshape(n, 3 * (max_dim + 1))


def numeric_batch(datasets: Sequence[NumericDataset], cfg: EncoderConfig) -> np.ndarray:
    sizes = {ds.n for ds in datasets}
    if len(sizes) != 1:
        raise ValueError(f"numeric batches need equal point counts, got {sorted(sizes)}")
    if next(iter(sizes)) > cfg.max_points:
        raise ValueError(f"{next(iter(sizes))} points exceed max_points={cfg.max_points}")
    return np.stack([numeric_tokens(ds, cfg.max_dim) for ds in datasets])


def symbolic_batch(sequences: Sequence[Sequence[str]], cfg: EncoderConfig, vocab: Vocabulary = VOCAB):
    """Encode framed token sequences and right-pad them: returns (ids, valid)."""
    ids = [vocab.encode(s) for s in sequences]
    longest = max(len(s) for s in ids)
    if longest > cfg.max_symbolic_len:
        raise ValueError(f"sequence of {longest} tokens exceeds max_symbolic_len={cfg.max_symbolic_len}")
    out = np.full((len(ids), longest), vocab.pad_id, dtype=np.int64)
    valid = np.zeros((len(ids), longest), dtype=bool)
    for i, s in enumerate(ids):
        out[i, : len(s)] = s
        valid[i, : len(s)] = True
    return out, valid


def encode_numeric(datasets: NumericDataset | Sequence[NumericDataset], encoder: NumericEncoder) -> np.ndarray:
    """Latent vectors for one dataset (shape (d,)) or a list (shape (B, d)).

    Datasets of different sizes are grouped internally.
    """
    single = isinstance(datasets, NumericDataset)
    items = [datasets] if single else list(datasets)
    out = np.zeros((len(items), encoder.cfg.d_emb), dtype=np.float64)
    groups: dict[int, list[int]] = {}
    for i, ds in enumerate(items):
        groups.setdefault(ds.n, []).append(i)
    with tc.no_grad():
        for idx in groups.values():
            z = encoder(numeric_batch([items[i] for i in idx], encoder.cfg))
            out[idx] = z.data
    return out[0] if single else out


def encode_symbolic(sequences, encoder: SymbolicEncoder) -> np.ndarray:
    """Latent vectors for one framed token sequence or a list of them."""
    single = bool(sequences) and isinstance(sequences[0], str)
    items = [sequences] if single else list(sequences)
    with tc.no_grad():
        ids, valid = symbolic_batch(items, encoder.cfg)
        z = encoder(ids, valid).data.astype(np.float64)
    return z[0] if single else z


__all__ = [
    "DualEncoder",
    "EncodeError",
    "EncoderConfig",
    "NumericEncoder",
    "SymbolicEncoder",
    "attention_pool",
    "encode_numeric",
    "encode_symbolic",
    "numeric_batch",
    "numeric_tokens",
    "pool_weights",
    "symbolic_batch",
]
