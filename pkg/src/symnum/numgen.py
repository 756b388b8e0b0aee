"""Datapoint sampling, target normalization and corpus files.

Inputs come from a mixture of Gaussian/uniform clusters and are standardized
per dimension. :func:`generate_pair` ties an expression to a clean dataset,
resampling bad inputs and restarting with a new expression when needed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .exprtree import Expression, SamplerConfig, compile_expression, from_prefix, sample_expression, to_text
from .tokens import FloatTriplet, detokenize_float, tokenize_float

MAX_ABS_Y = 1e100

__all__ = [
    "ClusterSpec",
    "FloatTriplet",
    "GenerationError",
    "GenStats",
    "NormalizeError",
    "NumericDataset",
    "detokenize_float",
    "generate_corpus",
    "generate_pair",
    "normalize_targets",
    "read_corpus",
    "sample_clusters",
    "sample_inputs",
    "tokenize_float",
    "write_corpus",
]


class NormalizeError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class NumericDataset:
    x: np.ndarray
    y: np.ndarray
    normalized_y: bool = False
    x_standardized: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"x {self.x.shape} and y {self.y.shape} disagree")
        if self.x.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "NumericDataset":
        return NumericDataset(self.x[idx], self.y[idx], self.normalized_y, self.x_standardized)


@dataclass
class ClusterSpec:
    weights: np.ndarray
    centroids: np.ndarray  # (k, D)
    spreads: np.ndarray  # (k, D), in (0, 1]
    shapes: list[str]

    @property
    def k(self) -> int:
        return len(self.weights)

    def counts(self, n: int) -> np.ndarray:
        """Points per cluster: floor(w_j * n), remainder to the heaviest cluster."""
        counts = np.floor(self.weights * n).astype(int)
        counts[int(np.argmax(self.weights))] += n - counts.sum()
        return counts

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        parts = []
        for j, count in enumerate(self.counts(n)):
            if count == 0:
                continue
            mu, sd = self.centroids[j], self.spreads[j]
            if self.shapes[j] == "gaussian":
                parts.append(mu + sd * rng.standard_normal((count, len(mu))))
            else:
                parts.append(mu + sd * rng.uniform(-1.0, 1.0, (count, len(mu))))
        return np.concatenate(parts, axis=0)


@dataclass
class GenStats:
    """Counters filled in by :func:`generate_pair`."""

    restarts: int = 0
    resampled_points: int = 0
    rejected_long: int = 0


def sample_clusters(rng: np.random.Generator, dim: int, k_max: int) -> ClusterSpec:
    k = int(rng.integers(1, k_max + 1))
    weights = rng.uniform(0.0, 1.0, k)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(k, 1.0 / k)
    centroids = rng.standard_normal((k, dim))
    spreads = 1.0 - rng.uniform(0.0, 1.0, (k, dim))  # (0, 1]
    shapes = ["gaussian" if rng.random() < 0.5 else "uniform" for _ in range(k)]
    return ClusterSpec(weights, centroids, spreads, shapes)


def standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std


def sample_inputs(rng: np.random.Generator, dim: int, n: int, k_max: int = 3) -> np.ndarray:
    """Draw ``n`` points in ``dim`` dimensions from a random cluster mixture,
    then standardize each column to zero mean and unit variance."""
    if n < 2 or dim < 1 or k_max < 1:
        raise ValueError("need n >= 2, dim >= 1, k_max >= 1")
    spec = sample_clusters(rng, dim, k_max)
    return standardize(spec.draw(rng, n))


def normalize_targets(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    lo, hi = y.min(), y.max()
    if not hi > lo:
        raise NormalizeError("targets have zero range")
    return (y - lo) / (hi - lo)


def generate_pair(
    rng: np.random.Generator,
    sampler_cfg: SamplerConfig = SamplerConfig(),
    n_points: int = 200,
    k_max: int = 3,
    max_restarts: int = 100,
    normalize_y: bool = True,
    resample_budget: int = 5,
    max_tokens: int | None = None,
    stats: GenStats | None = None,
    sample_fn: Callable[[np.random.Generator, SamplerConfig], Expression] = sample_expression,
) -> tuple[Expression, NumericDataset]:
    """Sample an expression with a well-behaved dataset.

    Points whose targets are undefined or exceed 1e100 in magnitude are
    redrawn from the same cluster mixture up to ``resample_budget`` times;
    after that (or on a constant target) the expression is discarded and a new
    one drawn. ``normalize_y`` selects pretraining mode (targets min-max scaled
    to [0, 1]) versus regression mode (raw targets). ``max_tokens`` rejects
    expressions whose prefix form is longer than the symbolic encoder accepts.
    """
    if max_restarts < 1:
        raise ValueError("max_restarts must be >= 1")
    stats = stats if stats is not None else GenStats()
    for attempt in range(max_restarts + 1):
        if attempt:
            stats.restarts += 1
        expr = sample_fn(rng, sampler_cfg)
        if max_tokens is not None and len(to_text(expr).split()) > max_tokens:
            stats.rejected_long += 1
            continue
        f = compile_expression(expr)
        spec = sample_clusters(rng, expr.input_dim, k_max)
        raw = spec.draw(rng, n_points)
        for _ in range(resample_budget + 1):
            x = standardize(raw)
            y = f(x)
            bad = ~np.isfinite(y) | (np.abs(y) > MAX_ABS_Y)
            if not bad.any():
                break
            stats.resampled_points += int(bad.sum())
            # redraw the offending rows from the same mixture
            fresh = spec.draw(rng, n_points)
            raw = raw.copy()
            raw[bad] = fresh[rng.permutation(n_points)[: bad.sum()]]
        else:
            continue
        if not y.max() > y.min():
            continue
        if normalize_y:
            y = normalize_targets(y)
        return expr, NumericDataset(x, np.array(y), normalized_y=normalize_y, x_standardized=True)
    raise GenerationError(f"no valid (expression, dataset) pair after {max_restarts} restarts")


# --------------------------------------------------------------------------- corpus files


def _record(expr: Expression, ds: NumericDataset, props: dict | None = None) -> dict:
    return {
        "expr": to_text(expr),
        "dim": expr.input_dim,
        "x": ds.x.tolist(),
        "y": ds.y.tolist(),
        "props": props or {},
    }


def _one_sample(args) -> dict:
    seed_seq, sampler_cfg, n_points, k_max, normalize_y, max_tokens = args
    rng = np.random.default_rng(seed_seq)
    expr, ds = generate_pair(rng, sampler_cfg, n_points, k_max, normalize_y=normalize_y, max_tokens=max_tokens)
    return _record(expr, ds)


def generate_corpus(
    n_samples: int,
    seed: int,
    sampler_cfg: SamplerConfig = SamplerConfig(),
    n_points: int = 200,
    k_max: int = 3,
    normalize_y: bool = True,
    max_tokens: int | None = None,
    workers: int = 1,
) -> list[dict]:
    """Generate corpus records; sample ``i`` always uses child seed ``i`` of
    ``seed``, so the output does not depend on the worker count."""
    children = np.random.SeedSequence(seed).spawn(n_samples)
    jobs = [(s, sampler_cfg, n_points, k_max, normalize_y, max_tokens) for s in children]
    if workers <= 1:
        return [_one_sample(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_one_sample, jobs, chunksize=16))


def write_corpus(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def read_corpus(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None


def record_to_pair(rec: dict) -> tuple[Expression, NumericDataset]:
    dim = rec.get("dim")
    expr = from_prefix(rec["expr"].split(), dim)
    ds = NumericDataset(np.array(rec["x"], dtype=float).reshape(-1, expr.input_dim), np.array(rec["y"], dtype=float))
    return expr, ds
