"""Property prediction from expressions: a one-hidden-layer MLP over the
symbolic encoder, trained from scratch, on frozen features, or fine-tuned."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .encoders import EncoderConfig, SymbolicEncoder, symbolic_batch
from .exprtree import Expression, SamplerConfig, to_prefix
from .nn import Linear, Module
from .numgen import NumericDataset, generate_pair
from .properties import PROPERTY_NAMES, PropertyConfig, compute_properties

MODES = ("supervised", "frozen", "finetuned")


@dataclass
class HeadConfig:
    hidden: int = 128
    mode: str = "frozen"
    prop: str = "ncr"
    train_size: int = 1000
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prop not in PROPERTY_NAMES:
            raise ValueError(f"unknown property {self.prop!r}")
        if self.train_size < 1:
            raise ValueError("train_size must be >= 1")


class ZeroVariance(ValueError):
    pass


def regression_metrics(y_true, y_pred) -> tuple[float, float]:
    """(R^2, NMSE) with NMSE = MSE / Var(y_true); R^2 = 1 - NMSE."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.size < 2:
        raise ValueError("need at least 2 points")
    var = float(np.var(y))
    if var == 0.0:
        raise ZeroVariance("true values have zero variance")
    nmse = float(np.mean((y - p) ** 2)) / var
    return 1.0 - nmse, nmse


# --------------------------------------------------------------------------- data


@dataclass
class LabelledExpr:
    tokens: list[str]
    labels: dict


def labelled_corpus(n: int, seed: int, sampler: SamplerConfig | None = None, n_points: int = 50, max_tokens: int = 62, prop_cfg: PropertyConfig = PropertyConfig()) -> list[LabelledExpr]:
    """One-dimensional expressions with oracle labels from their datasets."""
    sampler = sampler or SamplerConfig(d_max=1, b_max=3, u_max=2)
    if sampler.d_max != 1:
        raise ValueError("property labels are defined for one-dimensional data")
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        rng = np.random.default_rng(child)
        expr, ds = generate_pair(rng, sampler, n_points=n_points, max_tokens=max_tokens)
        out.append(LabelledExpr(to_prefix(expr, framed=True), compute_properties(ds, prop_cfg, rng)))
    return out


def label_vector(items: Sequence[LabelledExpr], prop: str) -> np.ndarray:
    try:
        return np.array([float(it.labels[prop]) for it in items])
    except KeyError:
        raise KeyError(f"missing label {prop!r}") from None


# --------------------------------------------------------------------------- model


class PropertyModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, hidden: int, rng: np.random.Generator):
        self.enc_cfg = enc_cfg
        self.enc_s = SymbolicEncoder(enc_cfg, rng)
        self.fc1 = Linear(enc_cfg.d_emb, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.y_mean = 0.0
        self.y_std = 1.0

    def head(self, z: tc.Tensor) -> tc.Tensor:
        out = self.fc2(tc.relu(self.fc1(z)))
        return tc.reshape(out, (z.shape[0],))

    def __call__(self, ids, valid) -> tc.Tensor:
        return self.head(self.enc_s(ids, valid))

    def encode(self, sequences: Sequence[Sequence[str]], batch: int = 256) -> np.ndarray:
        zs = []
        with tc.no_grad():
            for i in range(0, len(sequences), batch):
                ids, valid = symbolic_batch(sequences[i : i + batch], self.enc_cfg)
                zs.append(self.enc_s(ids, valid).data.astype(np.float64))
        return np.concatenate(zs, axis=0)

    def predict(self, sequences: Sequence[Sequence[str]]) -> np.ndarray:
        z = self.encode(sequences)
        with tc.no_grad():
            out = self.head(tc.tensor(z)).data.astype(np.float64)
        return out * self.y_std + self.y_mean


def predict_property(model: PropertyModel, expr: Expression | Sequence[str]) -> float:
    tokens = to_prefix(expr, framed=True) if isinstance(expr, Expression) else list(expr)
    return float(model.predict([tokens])[0])


@dataclass
class PropertyResult:
    model: PropertyModel
    r2: float
    nmse: float
    losses: list


def train_property_model(
    train: Sequence[LabelledExpr],
    test: Sequence[LabelledExpr],
    cfg: HeadConfig,
    enc_cfg: EncoderConfig,
    encoder_arrays: dict | None = None,
) -> PropertyResult:
    """Fit the head (and, unless frozen, the encoder) by MSE on standardized labels.

    ``encoder_arrays`` are pretrained ``enc_s.*`` weights; required for the
    frozen and finetuned modes and refused for the supervised mode.
    """
    if cfg.mode == "supervised" and encoder_arrays is not None:
        raise ValueError("supervised mode trains from scratch; do not pass an encoder checkpoint")
    if cfg.mode != "supervised" and encoder_arrays is None:
        raise ValueError(f"{cfg.mode} mode needs a pretrained encoder checkpoint")
    rng = np.random.default_rng(cfg.seed)
    model = PropertyModel(enc_cfg, cfg.hidden, rng)
    if encoder_arrays is not None:
        model.enc_s.load_state_dict({k[len("enc_s.") :]: v for k, v in encoder_arrays.items() if k.startswith("enc_s.")})
    train = list(train)[: cfg.train_size]
    y = label_vector(train, cfg.prop)
    y_test = label_vector(test, cfg.prop)
    model.y_mean = float(y.mean())
    model.y_std = float(y.std()) or 1.0
    target = (y - model.y_mean) / model.y_std
    seqs = [it.tokens for it in train]
    losses: list[float] = []
    frozen = cfg.mode == "frozen"
    if frozen:
        model.enc_s.requires_grad_(False)
        feats = model.encode(seqs)
        params = model.fc1.parameters() + model.fc2.parameters()
    else:
        params = model.parameters()
    opt = tc.Adam(params, cfg.lr)
    n = len(train)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            if frozen:
                pred = model.head(tc.tensor(feats[idx]))
            else:
                ids, valid = symbolic_batch([seqs[j] for j in idx], enc_cfg)
                pred = model(ids, valid)
            diff = tc.sub(pred, tc.tensor(target[idx]))
            loss = tc.mean(tc.mul(diff, diff))
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError("non-finite property loss")
            opt.zero_grad()
            tc.backward(loss)
            opt.step()
            losses.append(value)
    r2, nmse = regression_metrics(y_test, model.predict([it.tokens for it in test]))
    return PropertyResult(model, r2, nmse, losses)


def few_shot_sweep(train, test, cfg: HeadConfig, enc_cfg: EncoderConfig, encoder_arrays=None, sizes=(100, 1000, 10000)) -> list[dict]:
    """One (mode, train_size, R^2, NMSE) row per size that the data can supply."""
    rows = []
    for size in sizes:
        if size > len(train):
            continue
        run_cfg = HeadConfig(**{**asdict(cfg), "train_size": size})
        res = train_property_model(train, test, run_cfg, enc_cfg, None if cfg.mode == "supervised" else encoder_arrays)
        rows.append({"mode": cfg.mode, "train_size": size, "r2": res.r2, "nmse": res.nmse})
    return rows


__all__ = [
    "HeadConfig",
    "LabelledExpr",
    "MODES",
    "PropertyModel",
    "PropertyResult",
    "ZeroVariance",
    "few_shot_sweep",
    "label_vector",
    "labelled_corpus",
    "predict_property",
    "regression_metrics",
    "train_property_model",
]
