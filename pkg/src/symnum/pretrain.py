"""Contrastive (InfoNCE) pretraining of the numeric and symbolic encoders."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .encoders import DualEncoder, EncoderConfig, numeric_batch, symbolic_batch
from .exprtree import SamplerConfig, to_prefix
from .numgen import NumericDataset, generate_pair, record_to_pair
from .tensorcore import Tensor


@dataclass
class PretrainConfig:
    batch_size: int = 64
    temperature: float = 0.1
    peak_lr: float = 4e-5
    floor_lr: float = 1e-7
    warmup_steps: int = 1000
    epochs: int = 1
    steps_per_epoch: int = 1000
    seed: int = 0
    normalize: bool = True
    learn_temperature: bool = False
    min_points: int = 20
    max_points: int = 64
    log_every: int = 50
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(d_max=3, b_max=3, u_max=2))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 2 <= self.min_points <= self.max_points:
            raise ValueError("need 2 <= min_points <= max_points")
        if self.sampler.d_max > self.encoder.max_dim:
            raise ValueError(f"sampler d_max={self.sampler.d_max} exceeds encoder max_dim={self.encoder.max_dim}")
        if self.max_points > self.encoder.max_points:
            raise ValueError(f"max_points={self.max_points} exceeds encoder max_points={self.encoder.max_points}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"]["unary_ops"] = list(self.sampler.unary_ops)
        return d


def lr_schedule(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup from the floor to the peak, then inverse-sqrt decay."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_steps
    if step <= w:
        return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * step / w
    return cfg.peak_lr * math.sqrt(w / step)


# --------------------------------------------------------------------------- objective


def similarity_logits(zs: Tensor, zv: Tensor, temperature: float, normalize: bool = True, log_scale: Tensor | None = None) -> Tensor:
    if normalize:
        zs, zv = tc.l2_normalize(zs), tc.l2_normalize(zv)
    s = tc.matmul(zs, tc.transpose(zv, (1, 0)))
    if log_scale is not None:
        return tc.scale_by(s, tc.exp(log_scale))
    return tc.scale(s, 1.0 / temperature)


def info_nce_loss(zs, zv, temperature: float = 0.1, normalize: bool = True, log_scale: Tensor | None = None):
    """Symmetric InfoNCE: mean cross-entropy toward the diagonal of the
    similarity matrix, averaged over the symbolic->numeric and
    numeric->symbolic directions.

    Plain arrays in give a float out; Tensors in give a Tensor out.
    """
    if not isinstance(zs, Tensor):
        with tc.default_dtype(np.float64), tc.no_grad():
            return info_nce_loss(tc.tensor(zs), tc.tensor(zv), temperature, normalize, log_scale).item()
    if zs.ndim != 2 or zs.shape != zv.shape:
        raise ValueError(f"mismatched batches {zs.shape} vs {zv.shape}")
    b = zs.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    logits = similarity_logits(zs, zv, temperature, normalize, log_scale)
    diag = np.arange(b)
    s2v = tc.cross_entropy_with_logits(logits, diag)
    v2s = tc.cross_entropy_with_logits(tc.transpose(logits, (1, 0)), diag)
    return tc.scale(tc.add(s2v, v2s), 0.5)


def retrieval_topk(zs: np.ndarray, zv: np.ndarray, k: int = 1, normalize: bool = True) -> float:
    """Symmetric top-k retrieval accuracy of matched rows."""
    zs, zv = np.asarray(zs, dtype=np.float64), np.asarray(zv, dtype=np.float64)
    n = zs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if normalize:
        zs = zs / np.maximum(np.linalg.norm(zs, axis=1, keepdims=True), 1e-12)
        zv = zv / np.maximum(np.linalg.norm(zv, axis=1, keepdims=True), 1e-12)
    s = zs @ zv.T
    d = np.diag(s)
    rank_s2v = (s > d[:, None]).sum(axis=1)
    rank_v2s = (s > d[None, :]).sum(axis=0)
    return float(((rank_s2v < k).mean() + (rank_v2s < k).mean()) / 2)


# --------------------------------------------------------------------------- batches


@dataclass
class Batch:
    tokens: np.ndarray
    ids: np.ndarray
    valid: np.ndarray


def make_batch(pairs: Sequence[tuple], enc_cfg: EncoderConfig) -> Batch:
    tokens = numeric_batch([ds for _, ds in pairs], enc_cfg)
    ids, valid = symbolic_batch([to_prefix(e, framed=True) for e, _ in pairs], enc_cfg)
    return Batch(tokens, ids, valid)


def on_the_fly_batches(cfg: PretrainConfig, rng: np.random.Generator, normalize_y: bool = True) -> Iterator[list]:
    """Fresh pairs every step; one point count N per batch."""
    max_tokens = cfg.encoder.max_symbolic_len - 2
    while True:
        n = int(rng.integers(cfg.min_points, cfg.max_points + 1))
        yield [
            generate_pair(rng, cfg.sampler, n_points=n, normalize_y=normalize_y, max_tokens=max_tokens)
            for _ in range(cfg.batch_size)
        ]


def corpus_batches(records: Sequence[dict], batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """Random batches from a fixed corpus, drawn among records sharing N."""
    pairs = [record_to_pair(r) for r in records]
    by_n: dict[int, list[int]] = {}
    for i, (_, ds) in enumerate(pairs):
        by_n.setdefault(ds.n, []).append(i)
    groups = [g for g in by_n.values() if len(g) >= 2]
    if not groups:
        raise ValueError("corpus has no two records with the same point count")
    sizes = np.array([len(g) for g in groups], dtype=float)
    while True:
        g = groups[int(rng.choice(len(groups), p=sizes / sizes.sum()))]
        take = rng.choice(len(g), size=min(batch_size, len(g)), replace=False)
        yield [pairs[g[i]] for i in take]


# --------------------------------------------------------------------------- training


@dataclass
class StepLog:
    step: int
    loss: float
    top1: float
    lr: float


class Pretrainer:
    def __init__(self, cfg: PretrainConfig, model: DualEncoder | None = None):
        self.cfg = cfg
        self.model = model if model is not None else DualEncoder(cfg.encoder, cfg.seed)
        self.params = self.model.parameters()
        self.log_scale = None
        if cfg.learn_temperature:
            self.log_scale = tc.parameter(np.array(math.log(1.0 / cfg.temperature)))
            self.params.append(self.log_scale)
        self.opt = tc.Adam(self.params, cfg.peak_lr)
        self.step = 0
        self.history: list[StepLog] = []

    def train_step(self, batch: Batch) -> StepLog:
        cfg = self.cfg
        zv = self.model.enc_v(batch.tokens)
        zs = self.model.enc_s(batch.ids, batch.valid)
        loss = info_nce_loss(zs, zv, cfg.temperature, cfg.normalize, self.log_scale)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite contrastive loss at step {self.step}: {value}")
        self.opt.zero_grad()
        tc.backward(loss)
        self.step += 1
        lr = lr_schedule(self.step, cfg)
        self.opt.step(lr)
        top1 = retrieval_topk(zs.data, zv.data, 1, cfg.normalize)
        entry = StepLog(self.step, value, top1, lr)
        self.history.append(entry)
        return entry

    def run(self, batches: Iterator[list], steps: int | None = None, metrics_path=None, log=None) -> list[StepLog]:
        steps = self.cfg.total_steps if steps is None else steps
        writer = None
        fh = None
        if metrics_path is not None:
            fh = open(metrics_path, "w", newline="")
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "top1", "lr"])
        try:
            for _ in range(steps):
                entry = self.train_step(make_batch(next(batches), self.cfg.encoder))
                if writer is not None:
                    writer.writerow([entry.step, f"{entry.loss:.6f}", f"{entry.top1:.4f}", f"{entry.lr:.3e}"])
                if log is not None and (entry.step % self.cfg.log_every == 0 or entry.step == steps):
                    log(f"step {entry.step} loss {entry.loss:.4f} top1 {entry.top1:.3f} lr {entry.lr:.2e}")
        finally:
            if fh is not None:
                fh.close()
        return self.history

    def save(self, path) -> None:
        save_dual_encoder(path, self.model, self.cfg, self.log_scale)


def save_dual_encoder(path, model: DualEncoder, cfg: PretrainConfig | None = None, log_scale: Tensor | None = None) -> None:
    arrays = model.state_dict()
    if log_scale is not None:
        arrays["log_scale"] = log_scale.data
    config = {"kind": "dual_encoder", "encoder": model.cfg.to_dict()}
    if cfg is not None:
        config["pretrain"] = cfg.to_dict()
    tc.save_checkpoint(path, arrays, config)


def load_dual_encoder(path) -> tuple[DualEncoder, dict]:
    arrays, config = tc.load_checkpoint(path)
    if config.get("kind") not in ("dual_encoder", "sr_model"):
        raise ValueError(f"{path}: not an encoder checkpoint")
    model = DualEncoder(EncoderConfig(**config["encoder"]))
    model.load_state_dict({k: v for k, v in arrays.items() if k.startswith(("enc_v.", "enc_s."))})
    return model, config


def pretrain_run(cfg: PretrainConfig, corpus: Sequence[dict] | None = None, out=None, metrics_path=None, log=None) -> Pretrainer:
    """Train from fresh pairs (default) or a fixed corpus and optionally save."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    batches = corpus_batches(corpus, cfg.batch_size, rng) if corpus is not None else on_the_fly_batches(cfg, rng)
    trainer = Pretrainer(cfg)
    trainer.run(batches, metrics_path=metrics_path, log=log)
    if out is not None:
        trainer.save(out)
    return trainer


def evaluate_retrieval(model: DualEncoder, pairs: Sequence[tuple[object, NumericDataset]], k: int = 1) -> float:
    with tc.no_grad():
        batch = make_batch(pairs, model.cfg)
        zv = model.enc_v(batch.tokens).data
        zs = model.enc_s(batch.ids, batch.valid).data
    return retrieval_topk(zs, zv, k)


__all__ = [
    "Batch",
    "PretrainConfig",
    "Pretrainer",
    "StepLog",
    "corpus_batches",
    "evaluate_retrieval",
    "info_nce_loss",
    "load_dual_encoder",
    "lr_schedule",
    "make_batch",
    "on_the_fly_batches",
    "pretrain_run",
    "retrieval_topk",
    "save_dual_encoder",
]
