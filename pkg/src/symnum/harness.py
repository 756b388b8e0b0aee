"""Dataset ingestion, splits, noise, metrics, Pareto ranking and the bundled
ground-truth suite."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .encoders import encode_numeric, encode_symbolic
from .exprtree import compile_expression, to_prefix
from .numgen import NumericDataset, record_to_pair
from .properties import PROPERTY_NAMES, compute_properties
from .srgen import r2_score


class MalformedCSV(ValueError):
    pass


class DimensionError(ValueError):
    pass


def load_dataset(path, d_max: int = 10) -> NumericDataset:
    """Read a headed CSV whose last column is the target. Targets are kept raw."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise MalformedCSV(f"{path}: need a header and at least one data row")
    header = rows[0]
    width = len(header)
    if width < 2:
        raise MalformedCSV(f"{path}: need at least one feature and a target column")
    if width - 1 > d_max:
        raise DimensionError(f"{path}: {width - 1} features exceed d_max={d_max}")
    data = np.empty((len(rows) - 1, width))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise MalformedCSV(f"{path}: row {r} has {len(row)} cells, expected {width}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise MalformedCSV(f"{path}: row {r}, column {header[c]!r}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise MalformedCSV(f"{path}: row {r}, column {header[c]!r}: non-finite value {cell!r}")
            data[r - 2, c] = v
    return NumericDataset(data[:, :-1], data[:, -1])


def save_dataset(path, ds: NumericDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["y"])
        for xi, yi in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


def split(ds: NumericDataset, ratio: float = 0.75, seed: int = 0) -> tuple[NumericDataset, NumericDataset]:
    if ds.n < 4:
        raise ValueError("need at least 4 points to split")
    order = np.random.default_rng(seed).permutation(ds.n)
    k = int(math.floor(ratio * ds.n))
    return ds.subset(np.sort(order[:k])), ds.subset(np.sort(order[k:]))


def add_noise(y: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """y + eps with eps ~ N(0, (gamma * rms(y))^2)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if gamma == 0:
        return y.copy()
    rms = float(np.sqrt(np.mean(y**2)))
    return y + gamma * rms * rng.standard_normal(y.shape)


def solution_rate(r2s: Sequence[float], threshold: float = 0.99) -> float:
    r2s = np.asarray(r2s, dtype=np.float64)
    if r2s.size == 0:
        raise ValueError("empty R^2 list")
    return float(np.mean(r2s > threshold))


def pareto_fronts(points: Sequence[tuple[float, float]]) -> list[int]:
    """Front index (1 = non-dominated) per point, lower is better on both axes."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError("ranks must be finite")
    front = np.zeros(len(pts), dtype=int)
    level = 0
    while (front == 0).any():
        level += 1
        left = np.flatnonzero(front == 0)
        for i in left:
            dominated = False
            for j in left:
                if j != i and np.all(pts[j] <= pts[i]) and np.any(pts[j] < pts[i]):
                    dominated = True
                    break
            if not dominated:
                front[i] = level
    return front.tolist()


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_v = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def method_ranks(records: Sequence["EvalRecord"]) -> dict[str, tuple[float, float]]:
    """Median accuracy rank and median complexity rank per method, ranking
    methods within each dataset (rank 1 = highest R^2 / lowest complexity)."""
    by_ds: dict[str, list] = {}
    for r in records:
        by_ds.setdefault(r.dataset, []).append(r)
    acc: dict[str, list] = {}
    comp: dict[str, list] = {}
    for rs in by_ds.values():
        r2 = np.array([r.r2 if math.isfinite(r.r2) else -1e300 for r in rs])
        cx = np.array([float(r.complexity) for r in rs])
        for r, a, c in zip(rs, _average_ranks(-r2), _average_ranks(cx)):
            acc.setdefault(r.method, []).append(a)
            comp.setdefault(r.method, []).append(c)
    return {m: (float(np.median(acc[m])), float(np.median(comp[m]))) for m in acc}


# --------------------------------------------------------------------------- ground-truth suite


@dataclass(frozen=True)
class GroundTruth:
    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]
    low: float
    high: float
    formula: str

    def sample(self, n: int, rng: np.random.Generator) -> NumericDataset:
        x = rng.uniform(self.low, self.high, (n, self.dim))
        return NumericDataset(x, self.fn(x))


# Chosen before any model was trained; kept fixed since.
GROUND_TRUTH = (
    GroundTruth("gt01_linear", 1, lambda x: 2.5 * x[:, 0] + 1.0, -2.0, 2.0, "2.5*x0 + 1"),
    GroundTruth("gt02_quadratic", 1, lambda x: x[:, 0] ** 2 - x[:, 0], -2.0, 2.0, "x0^2 - x0"),
    GroundTruth("gt03_cubic", 1, lambda x: x[:, 0] ** 3 + 0.5 * x[:, 0], -2.0, 2.0, "x0^3 + 0.5*x0"),
    GroundTruth("gt04_sin_plus", 1, lambda x: np.sin(x[:, 0]) + x[:, 0], -3.0, 3.0, "sin(x0) + x0"),
    GroundTruth("gt05_cos", 1, lambda x: 3.0 * np.cos(2.0 * x[:, 0]), -2.0, 2.0, "3*cos(2*x0)"),
    GroundTruth("gt06_exp", 1, lambda x: np.exp(0.5 * x[:, 0]), -2.0, 2.0, "exp(0.5*x0)"),
    GroundTruth("gt07_log", 1, lambda x: np.log(x[:, 0]), 1.0, 5.0, "log(x0)"),
    GroundTruth("gt08_product", 2, lambda x: x[:, 0] * x[:, 1], -2.0, 2.0, "x0*x1"),
    GroundTruth("gt09_sum", 2, lambda x: x[:, 0] + 2.0 * x[:, 1], -2.0, 2.0, "x0 + 2*x1"),
    GroundTruth("gt10_sin_product", 2, lambda x: np.sin(x[:, 0]) * x[:, 1], -2.0, 2.0, "sin(x0)*x1"),
    GroundTruth("gt11_paraboloid", 2, lambda x: x[:, 0] ** 2 + x[:, 1] ** 2, -2.0, 2.0, "x0^2 + x1^2"),
    GroundTruth("gt12_three", 3, lambda x: x[:, 0] * x[:, 1] + x[:, 2], -2.0, 2.0, "x0*x1 + x2"),
)


@dataclass
class EvalRecord:
    dataset: str
    method: str
    r2: float
    complexity: int
    gamma: float
    wall_time: float = 0.0
    expression: str = ""

    @property
    def r2_clipped(self) -> float:
        return max(self.r2, 0.0) if math.isfinite(self.r2) else 0.0


def evaluate_suite(
    fit: Callable[[NumericDataset], tuple],
    method: str,
    suite: Sequence[GroundTruth] = GROUND_TRUTH,
    gamma: float = 0.0,
    seed: int = 0,
    n_points: int = 100,
    timed: bool = False,
) -> list[EvalRecord]:
    """Run ``fit(train) -> (expression, complexity)`` on every suite member.

    Noise is added to the training targets only; test R^2 uses the clean
    held-out quarter, which ``fit`` never sees.
    """
    out = []
    for k, gt in enumerate(suite):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        ds = gt.sample(n_points, rng)
        train, test = split(ds, 0.75, seed + k)
        noisy = NumericDataset(train.x, add_noise(train.y, gamma, rng))
        t0 = time.perf_counter()
        expr, cx = fit(noisy)
        elapsed = time.perf_counter() - t0 if timed else 0.0
        r2 = r2_score(test.y, compile_expression(expr)(test.x)) if expr is not None else -math.inf
        out.append(EvalRecord(gt.name, method, r2, cx, gamma, elapsed, " ".join(to_prefix(expr)) if expr is not None else ""))
    return out


def write_records(path, records: Sequence[EvalRecord], timed: bool = False) -> None:
    cols = ["dataset", "method", "gamma", "r2", "r2_clipped", "complexity", "expression"] + (["wall_time"] if timed else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            row = [r.dataset, r.method, r.gamma, f"{r.r2:.10g}", f"{r.r2_clipped:.10g}", r.complexity, r.expression]
            if timed:
                row.append(f"{r.wall_time:.3f}")
            w.writerow(row)


# --------------------------------------------------------------------------- embeddings


def export_embeddings(records: Sequence[dict], encoder, out, modality: str = "numeric") -> int:
    """Write one CSV row per corpus record: id, latent components, property labels.

    Properties are computed on the fly for 1-D records and left blank otherwise.
    """
    pairs = [record_to_pair(r) for r in records]
    if modality == "numeric":
        z = encode_numeric([ds for _, ds in pairs], encoder.enc_v)
    elif modality == "symbolic":
        z = encode_symbolic([to_prefix(e, framed=True) for e, _ in pairs], encoder.enc_s)
    else:
        raise ValueError("modality must be numeric or symbolic")
    z = np.atleast_2d(z)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"z{i}" for i in range(z.shape[1])] + list(PROPERTY_NAMES))
        for i, ((_, ds), row) in enumerate(zip(pairs, z)):
            props = records[i].get("props") or (compute_properties(ds, rng=np.random.default_rng(i)) if ds.dim == 1 else {})
            w.writerow([i] + [f"{v:.8g}" for v in row] + [("" if p not in props else f"{props[p]:.8g}") for p in PROPERTY_NAMES])
    return len(pairs)


__all__ = [
    "DimensionError",
    "EvalRecord",
    "GROUND_TRUTH",
    "GroundTruth",
    "MalformedCSV",
    "add_noise",
    "evaluate_suite",
    "export_embeddings",
    "load_dataset",
    "method_ranks",
    "pareto_fronts",
    "save_dataset",
    "solution_rate",
    "split",
    "write_records",
]
