"""Expression generation from numeric latents.

A mapping network turns one latent vector into a short prefix that a
transformer decoder cross-attends to while emitting prefix-order tokens.
Decoding is grammar-masked so that every finished stream parses; the
sampled constants seed a BFGS refinement against the data.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .encoders import EncoderConfig, NumericEncoder, init_float_rows, numeric_batch, symbolic_batch
from .exprtree import (
    Expression,
    ParseError,
    SamplerConfig,
    Skeleton,
    compile_expression,
    complexity,
    constants,
    from_prefix,
    skeletonize,
    to_prefix,
    to_text,
)
from .nn import DecoderBlock, Embedding, LayerNorm, Linear, Module, causal_mask
from .numgen import NumericDataset, generate_pair
from .numopt import StartFailure, bfgs_minimize
from .tensorcore import Tensor
from .tokens import VOCAB


@dataclass
class DecoderConfig:
    d_emb: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_mult: int = 4
    prefix_len: int = 8
    max_len: int = 64  # includes BOS/EOS
    vocab_size: int = field(default=len(VOCAB))

    def __post_init__(self):
        if self.d_emb % self.n_heads:
            raise ValueError("d_emb must be divisible by n_heads")
        if self.prefix_len < 1 or self.max_len < 3:
            raise ValueError("need prefix_len >= 1 and max_len >= 3")


class MappingNetwork(Module):
    """z (B, d) -> Linear(d, L*d) -> ReLU -> reshape (B, L, d) -> per-row Linear(d, d)."""

    def __init__(self, d: int, prefix_len: int, rng: np.random.Generator):
        self.d = d
        self.prefix_len = prefix_len
        self.fc1 = Linear(d, prefix_len * d, rng)
        self.fc2 = Linear(d, d, rng)

    def __call__(self, z: Tensor) -> Tensor:
        b = z.shape[0]
        h = tc.reshape(tc.relu(self.fc1(z)), (b, self.prefix_len, self.d))
        return self.fc2(h)


def map_latent(mapper: MappingNetwork, z) -> np.ndarray:
    """Prefix matrix (L, d) for one latent vector."""
    with tc.no_grad():
        out = mapper(tc.tensor(np.asarray(z).reshape(1, -1)))
    return out.data[0]


class ExprDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.d_emb
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, d, rng)
        init_float_rows(self.embed.table, VOCAB.mantissa_offset, VOCAB.n_mantissa, VOCAB.exponent_offset, VOCAB.n_exponent)
        self.pos = Embedding(cfg.max_len, d, rng)
        self.blocks = [DecoderBlock(d, cfg.n_heads, cfg.ffn_mult, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        self.out = Linear(d, cfg.vocab_size, rng)

    def hidden(self, ids: np.ndarray, memory: Tensor) -> Tensor:
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len={self.cfg.max_len}")
        x = tc.add(self.embed(ids), self.pos(np.broadcast_to(np.arange(t), (b, t))))
        mask = causal_mask(t)
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.ln_f(x)

    def __call__(self, ids: np.ndarray, memory: Tensor) -> Tensor:
        """Logits (B, T, V) for next-token prediction at every position."""
        return self.out(self.hidden(ids, memory))


class SRModel(Module):
    """Numeric encoder + mapping network + decoder; parameter names are
    ``enc_v.*``, ``mapper.*`` and ``decoder.*``."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0):
        if enc_cfg.d_emb != dec_cfg.d_emb:
            raise ValueError("decoder d_emb must equal encoder d_emb")
        rng = np.random.default_rng(seed)
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.enc_v = NumericEncoder(enc_cfg, rng)
        self.mapper = MappingNetwork(dec_cfg.d_emb, dec_cfg.prefix_len, rng)
        self.decoder = ExprDecoder(dec_cfg, rng)

    def latents(self, datasets: Sequence[NumericDataset]) -> np.ndarray:
        from .encoders import encode_numeric

        return encode_numeric(list(datasets), self.enc_v)

    def loss(self, tokens: np.ndarray, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        """Token-matching cross-entropy, averaged per expression then over the batch."""
        z = self.enc_v(tokens)
        memory = self.mapper(z)
        h = self.decoder.hidden(ids[:, :-1], memory)
        b, t, d = h.shape
        w = valid[:, 1:].astype(np.float64)
        w = w / w.sum(axis=1, keepdims=True) / b
        # project only positions with a real target; padding would dominate the V-wide matmul
        keep = np.flatnonzero(w.reshape(-1) > 0)
        logits = self.decoder.out(tc.take_rows(tc.reshape(h, (b * t, d)), keep))
        return tc.cross_entropy_with_logits(logits, ids[:, 1:].reshape(-1)[keep], w.reshape(-1)[keep])


def save_sr_model(path, model: SRModel, extra: dict | None = None) -> None:
    config = {"kind": "sr_model", "encoder": model.enc_cfg.to_dict(), "decoder": asdict(model.dec_cfg)}
    if extra:
        config.update(extra)
    tc.save_checkpoint(path, model.state_dict(), config)


def load_sr_model(path) -> SRModel:
    arrays, config = tc.load_checkpoint(path)
    if config.get("kind") != "sr_model":
        raise ValueError(f"{path}: not an SR model checkpoint")
    model = SRModel(EncoderConfig(**config["encoder"]), DecoderConfig(**config["decoder"]))
    model.load_state_dict(arrays)
    return model


def sr_model_from_encoder(enc_arrays: dict, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, seed: int = 0) -> SRModel:
    """Fresh mapper/decoder on top of pretrained numeric-encoder weights."""
    model = SRModel(enc_cfg, dec_cfg, seed)
    model.enc_v.load_state_dict({k[len("enc_v.") :]: v for k, v in enc_arrays.items() if k.startswith("enc_v.")})
    return model


# --------------------------------------------------------------------------- training


@dataclass
class SRTrainConfig:
    stage1_steps: int = 1000
    stage2_steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    encoder_lr: float = 2e-4
    warmup_steps: int = 100
    min_points: int = 20
    max_points: int = 64
    seed: int = 0
    log_every: int = 50
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(d_max=3, b_max=3, u_max=2))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"]["unary_ops"] = list(self.sampler.unary_ops)
        return d


def sr_batches(cfg: SRTrainConfig, max_tokens: int, rng: np.random.Generator) -> Iterator[list]:
    """Fresh (expression, dataset) pairs with raw (unnormalized) targets."""
    while True:
        n = int(rng.integers(cfg.min_points, cfg.max_points + 1))
        yield [generate_pair(rng, cfg.sampler, n_points=n, normalize_y=False, max_tokens=max_tokens) for _ in range(cfg.batch_size)]


def fixed_batches(pairs: Sequence[tuple], batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    by_n: dict[int, list] = {}
    for p in pairs:
        by_n.setdefault(p[1].n, []).append(p)
    groups = list(by_n.values())
    while True:
        g = groups[int(rng.integers(len(groups)))]
        idx = rng.permutation(len(g))[:batch_size]
        yield [g[i] for i in idx]


def _warm(step: int, warmup: int, peak: float) -> float:
    return peak * min(1.0, step / warmup) if step <= warmup else peak * math.sqrt(warmup / step)


def train_sr(model: SRModel, batches: Iterator[list], cfg: SRTrainConfig, log=None) -> list[float]:
    """Stage 1 trains mapper + decoder with the encoder frozen; stage 2
    fine-tunes everything (the encoder at ``cfg.encoder_lr``)."""
    losses: list[float] = []
    head = model.mapper.parameters() + model.decoder.parameters()
    enc = model.enc_v.parameters()

    def run(steps: int, stage: int, opt_head: tc.Adam, opt_enc: tc.Adam | None) -> None:
        for step in range(1, steps + 1):
            pairs = next(batches)
            tokens = numeric_batch([ds for _, ds in pairs], model.enc_cfg)
            ids, valid = symbolic_batch([to_prefix(e, framed=True) for e, _ in pairs], model.enc_cfg)
            loss = model.loss(tokens, ids, valid)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite SR loss in stage {stage}, step {step}")
            for p in head + enc:
                p.grad = None
            tc.backward(loss)
            opt_head.step(_warm(step, cfg.warmup_steps, cfg.lr))
            if opt_enc is not None:
                opt_enc.step(_warm(step, cfg.warmup_steps, cfg.encoder_lr))
            losses.append(value)
            if log is not None and step % cfg.log_every == 0:
                log(f"stage {stage} step {step} loss {np.mean(losses[-cfg.log_every:]):.4f}")

    model.enc_v.requires_grad_(False)
    opt_head = tc.Adam(head, cfg.lr)
    run(cfg.stage1_steps, 1, opt_head, None)
    model.enc_v.requires_grad_(True)
    if cfg.stage2_steps:
        run(cfg.stage2_steps, 2, opt_head, tc.Adam(enc, cfg.encoder_lr))
    return losses


# --------------------------------------------------------------------------- decoding


class Grammar:
    """Per-sequence decoding state: open operand slots and constant-triplet phase."""

    def __init__(self, input_dim: int, max_len: int):
        v = len(VOCAB)
        self.max_len = max_len
        self.op_arity = np.zeros(v, dtype=np.int64)
        self.op_arity[VOCAB.binary_ids] = 2
        self.op_arity[VOCAB.unary_ids] = 1
        self.is_binary = np.zeros(v, bool)
        self.is_binary[VOCAB.binary_ids] = True
        self.is_unary = np.zeros(v, bool)
        self.is_unary[VOCAB.unary_ids] = True
        self.is_var = np.zeros(v, bool)
        self.is_var[VOCAB.variable_ids[:input_dim]] = True
        self.is_sign = np.zeros(v, bool)
        self.is_sign[VOCAB.sign_ids] = True
        self.is_mant = np.zeros(v, bool)
        self.is_mant[VOCAB.mantissa_offset : VOCAB.mantissa_offset + VOCAB.n_mantissa] = True
        self.is_exp = np.zeros(v, bool)
        self.is_exp[VOCAB.exponent_offset : VOCAB.exponent_offset + VOCAB.n_exponent] = True
        self.is_eos = np.zeros(v, bool)
        self.is_eos[VOCAB.eos_id] = True

    def allowed(self, need: int, phase: int, length: int) -> np.ndarray:
        """Boolean mask over the vocabulary for the next token.

        ``length`` counts tokens emitted so far, BOS included. A token is
        legal only if the tree can still be closed within ``max_len``.
        """
        if phase == 1:
            return self.is_mant
        if phase == 2:
            return self.is_exp
        if need == 0:
            return self.is_eos
        budget = self.max_len - length - 1  # tokens left before the EOS slot
        mask = np.zeros_like(self.is_var)
        if budget >= need:
            mask |= self.is_var
        if budget >= need + 2:
            mask |= self.is_sign
        if budget >= need + 1:
            mask |= self.is_unary
        if budget >= need + 2:
            mask |= self.is_binary
        return mask

    def advance(self, tok: int, need: int, phase: int) -> tuple[int, int]:
        if phase == 1:
            return need, 2
        if phase == 2:
            return need - 1, 0
        if self.is_sign[tok]:
            return need, 1
        if self.is_var[tok]:
            return need - 1, 0
        if self.is_binary[tok]:
            return need + 1, 0
        return need, 0


def decode(model: SRModel, z: np.ndarray, input_dim: int, temperature: float, rng: np.random.Generator, max_len: int | None = None) -> list[list[str]]:
    """Autoregressively decode one token stream per latent row of ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = z.shape[0]
    max_len = model.dec_cfg.max_len if max_len is None else min(max_len, model.dec_cfg.max_len)
    grammar = Grammar(input_dim, max_len)
    seqs = np.full((m, 1), VOCAB.bos_id, dtype=np.int64)
    need = np.ones(m, dtype=np.int64)
    phase = np.zeros(m, dtype=np.int64)
    done = np.zeros(m, dtype=bool)
    with tc.no_grad():
        memory = model.mapper(tc.tensor(z))
        while not done.all() and seqs.shape[1] < max_len:
            h = model.decoder.hidden(seqs, memory)
            last = tc.tensor(h.data[:, -1, :])
            logits = model.decoder.out(last).data.astype(np.float64)
            nxt = np.full(m, VOCAB.pad_id, dtype=np.int64)
            for i in range(m):
                if done[i]:
                    continue
                mask = grammar.allowed(int(need[i]), int(phase[i]), seqs.shape[1])
                row = np.where(mask, logits[i], -np.inf)
                if temperature <= 0:
                    tok = int(np.argmax(row))
                else:
                    row = row / temperature
                    row = row - row.max()
                    p = np.exp(row)
                    p /= p.sum()
                    tok = int(rng.choice(len(p), p=p))
                nxt[i] = tok
                if tok == VOCAB.eos_id:
                    done[i] = True
                else:
                    need[i], phase[i] = grammar.advance(tok, int(need[i]), int(phase[i]))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    out = []
    for i in range(m):
        words = VOCAB.decode(seqs[i])
        if VOCAB.words[VOCAB.pad_id] in words:
            words = words[: words.index(VOCAB.words[VOCAB.pad_id])]
        out.append(words)
    return out


# --------------------------------------------------------------------------- candidates


@dataclass
class Candidate:
    expression: Expression | None
    skeleton: Skeleton
    constants: np.ndarray
    r2: float = float("nan")
    complexity: int = 0

    @property
    def key(self) -> str:
        return to_text(self.skeleton)


def parse_candidate(tokens: Sequence[str], input_dim: int) -> Candidate | None:
    try:
        expr = from_prefix(list(tokens), input_dim)
    except ParseError:
        return None
    return Candidate(expr, skeletonize(expr), np.array(constants(expr)), complexity=complexity(expr))


def dedup(candidates: Sequence[Candidate]) -> list[Candidate]:
    seen: set[str] = set()
    out = []
    for c in candidates:
        if c.key not in seen:
            seen.add(c.key)
            out.append(c)
    return out


def generate_candidates(model: SRModel, z: np.ndarray, input_dim: int, b: int = 2, temperature: float = 0.7, rng=None) -> list[Candidate]:
    """Sample ``b`` expressions from one latent; unparseable streams are
    dropped and skeleton duplicates removed."""
    rng = rng if rng is not None else np.random.default_rng(0)
    streams = decode(model, np.repeat(np.atleast_2d(z), b, axis=0), input_dim, temperature, rng)
    return dedup([c for c in (parse_candidate(s, input_dim) for s in streams) if c is not None])


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    """Coefficient of determination; -inf when predictions are not all finite."""
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != y.shape or not np.all(np.isfinite(pred)):
        return -math.inf
    with np.errstate(over="ignore"):
        sst = float(np.sum((y - y.mean()) ** 2))
        sse = float(np.sum((y - pred) ** 2))
    if not math.isfinite(sse):
        return -math.inf
    if sst == 0.0:
        return 1.0 if sse == 0.0 else -math.inf
    return 1.0 - sse / sst


def refine_constants(skeleton: Skeleton, ds: NumericDataset, init: Sequence[float] | None = None, max_iter: int = 100) -> Candidate:
    """Fit the skeleton's constants to ``ds`` by BFGS on the MSE.

    ``init`` are the decoded constants (ones when absent). The result keeps
    whichever of the start and the optimum scores the higher R^2.
    """
    f = compile_expression(skeleton)
    k = skeleton.k
    x0 = np.ones(k) if init is None or len(init) != k else np.asarray(init, dtype=np.float64)
    y = ds.y

    def mse(c):
        pred = f(ds.x, c)
        if not np.all(np.isfinite(pred)):
            return math.inf
        with np.errstate(over="ignore"):
            return float(np.mean((pred - y) ** 2))

    def score(c) -> float:
        return r2_score(y, np.asarray(f(ds.x, c), dtype=np.float64))

    best_c, best_r2 = x0, score(x0)
    if k:
        starts = [x0] if math.isfinite(mse(x0)) else []
        if not starts and math.isfinite(mse(np.ones(k))):
            starts = [np.ones(k)]
        for start in starts:
            try:
                res = bfgs_minimize(mse, start, tol=1e-10, max_iter=max_iter)
            except StartFailure:
                continue
            r2 = score(res.x)
            if r2 > best_r2:
                best_c, best_r2 = res.x, r2
    expr = skeleton.fill(best_c)
    return Candidate(expr, skeleton, np.asarray(best_c), best_r2, complexity(expr))


class RefineCache:
    """Refines each skeleton once per regression run; later hits reuse the
    first result even if they were decoded with different constants."""

    def __init__(self, ds: NumericDataset, max_iter: int = 100):
        self.ds = ds
        self.max_iter = max_iter
        self.store: dict[str, Candidate] = {}
        self.calls = 0

    def refine(self, cand: Candidate) -> Candidate:
        hit = self.store.get(cand.key)
        if hit is not None:
            return hit
        self.calls += 1
        out = refine_constants(cand.skeleton, self.ds, cand.constants, self.max_iter)
        self.store[cand.key] = out
        return out


__all__ = [
    "Candidate",
    "DecoderConfig",
    "ExprDecoder",
    "Grammar",
    "MappingNetwork",
    "RefineCache",
    "SRModel",
    "SRTrainConfig",
    "decode",
    "dedup",
    "fixed_batches",
    "generate_candidates",
    "load_sr_model",
    "map_latent",
    "parse_candidate",
    "r2_score",
    "refine_constants",
    "save_sr_model",
    "sr_batches",
    "sr_model_from_encoder",
    "train_sr",
]
