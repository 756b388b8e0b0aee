"""Numeric-behaviour labels for one-dimensional datasets.

All functions take a :class:`~symnum.numgen.NumericDataset` with ``D == 1``
and sort it by ``x`` internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .numgen import NumericDataset

PROPERTY_NAMES = ("ncr", "up", "osc", "meany")


class TooFewPoints(ValueError):
    pass


@dataclass(frozen=True)
class PropertyConfig:
    jensen_trials: int = 1000
    epsilon: float = 1e-9
    exhaustive: bool = True
    exhaustive_limit: int = 100_000

    def __post_init__(self):
        if self.jensen_trials < 1 or not self.epsilon > 0:
            raise ValueError("need jensen_trials >= 1 and epsilon > 0")


def _sorted_xy(ds: NumericDataset, min_points: int) -> tuple[np.ndarray, np.ndarray]:
    if ds.dim != 1:
        raise ValueError(f"property oracles need a 1-D dataset, got D={ds.dim}")
    if ds.n < min_points:
        raise TooFewPoints(f"need at least {min_points} points, got {ds.n}")
    order = np.argsort(ds.x[:, 0], kind="stable")
    return ds.x[order, 0], ds.y[order]


def _jensen_holds(x: np.ndarray, y: np.ndarray, i, j, k, eps: float) -> np.ndarray:
    """Chord test for sorted index triples i < j < k (vectorized)."""
    xi, xj, xk = x[i], x[j], x[k]
    chord = ((xk - xj) * y[i] + (xj - xi) * y[k]) / (xk - xi)
    return y[j] <= chord + eps


def ncr(ds: NumericDataset, cfg: PropertyConfig = PropertyConfig(), rng: np.random.Generator | None = None) -> float:
    """Non-convexity ratio: share of point triples that break the chord test.

    Enumerates every triple when ``cfg.exhaustive`` and C(N,3) is at most
    ``cfg.exhaustive_limit``; otherwise runs ``cfg.jensen_trials`` random
    trials. Triples with two equal ``x`` values are skipped (exhaustive) or
    redrawn (sampling).
    """
    x, y = _sorted_xy(ds, 3)
    n = len(x)
    if cfg.exhaustive and comb(n, 3) <= cfg.exhaustive_limit:
        i, j, k = _all_triples(n)
        ok = (x[i] < x[j]) & (x[j] < x[k])
        if not ok.any():
            raise TooFewPoints("fewer than three distinct x values")
        holds = _jensen_holds(x, y, i[ok], j[ok], k[ok], cfg.epsilon)
        return float(1.0 - holds.mean())
    if len(np.unique(x)) < 3:
        raise TooFewPoints("fewer than three distinct x values")
    rng = rng if rng is not None else np.random.default_rng(0)
    hits = 0
    remaining = cfg.jensen_trials
    while remaining:
        i, j, k = _distinct_triples(rng, n, remaining)
        ok = (x[i] < x[j]) & (x[j] < x[k])
        hits += int(_jensen_holds(x, y, i[ok], j[ok], k[ok], cfg.epsilon).sum())
        remaining = int((~ok).sum())
    return 1.0 - hits / cfg.jensen_trials


def _distinct_triples(rng: np.random.Generator, n: int, m: int):
    """m uniform draws of three distinct indices, each returned sorted."""
    a = rng.integers(0, n, m)
    b = rng.integers(0, n - 1, m)
    b = b + (b >= a)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = rng.integers(0, n - 2, m)
    c = c + (c >= lo)
    c = c + (c >= hi)
    idx = np.sort(np.stack([a, b, c], axis=1), axis=1)
    return idx[:, 0], idx[:, 1], idx[:, 2]


def _all_triples(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i, j, k = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    mask = (i < j) & (j < k)
    return i[mask], j[mask], k[mask]


def _directions(ds: NumericDataset, eps: float) -> np.ndarray:
    _, y = _sorted_xy(ds, 2)
    dy = np.diff(y)
    return np.where(dy > eps, 1, np.where(dy < -eps, -1, 0))


def upwardness(ds: NumericDataset, epsilon: float = 1e-9) -> float:
    """Mean direction of consecutive sorted points, in [-1, 1]."""
    return float(_directions(ds, epsilon).mean())


def oscillation_count(ds: NumericDataset, epsilon: float = 1e-9) -> int:
    u = _directions(ds, epsilon)
    u = u[u != 0]
    return int(np.count_nonzero(u[1:] != u[:-1]))


def mean_normalized_y(ds: NumericDataset) -> float:
    y = ds.y
    lo, hi = y.min(), y.max()
    if not hi > lo:
        return 0.5
    return float(np.mean((y - lo) / (hi - lo)))


def compute_properties(ds: NumericDataset, cfg: PropertyConfig = PropertyConfig(), rng=None) -> dict:
    """All four labels for a 1-D dataset; an empty dict for D > 1."""
    if ds.dim != 1:
        return {}
    return {
        "ncr": ncr(ds, cfg, rng),
        "up": upwardness(ds, cfg.epsilon),
        "osc": oscillation_count(ds, cfg.epsilon),
        "meany": mean_normalized_y(ds),
    }
