"""BFGS with finite-difference gradients, and the Grey Wolf Optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class StartFailure(ValueError):
    """The objective is not finite at the starting point."""


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    iterations: int
    converged: bool


def fd_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, fx: float | None = None) -> np.ndarray:
    """Central differences with step 1e-6 * max(1, |x_i|)."""
    g = np.zeros_like(x)
    for i in range(x.size):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = fun(xp), fun(xm)
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * h)
        elif fx is not None and np.isfinite(fp):
            g[i] = (fp - fx) / h
        elif fx is not None and np.isfinite(fm):
            g[i] = (fx - fm) / h
    return g


def bfgs_minimize(
    fun: Callable[[np.ndarray], float],
    x0,
    tol: float = 1e-8,
    max_iter: int = 200,
    grad: Callable[[np.ndarray], np.ndarray] | None = None,
) -> BfgsResult:
    """Minimize ``fun`` by BFGS with an Armijo backtracking line search.

    The returned value is never worse than ``fun(x0)``.
    """
    x = np.array(x0, dtype=np.float64).reshape(-1)

    def f(v):
        out = float(fun(v))
        return out if np.isfinite(out) else np.inf

    fx = f(x)
    if not np.isfinite(fx):
        raise StartFailure(f"objective is not finite at x0={x}")
    gradient = grad if grad is not None else (lambda v: fd_gradient(f, v, None))
    k = x.size
    if k == 0:
        return BfgsResult(x, fx, 0, True)
    H = np.eye(k)
    g = gradient(x)
    it = 0
    converged = False
    while it < max_iter:
        if not np.all(np.isfinite(g)):
            break
        if np.linalg.norm(g) < tol:
            converged = True
            break
        it += 1
        with np.errstate(over="ignore", invalid="ignore"):
            p = -H @ g
            slope = float(g @ p)
        if not np.isfinite(slope):
            break
        if slope >= 0:  # lost descent direction; restart from steepest descent
            H = np.eye(k)
            p = -g
            slope = float(g @ p)
        t = 1.0
        accepted = False
        for _ in range(60):
            xn = x + t * p
            fn = f(xn)
            if fn <= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if np.allclose(H, np.eye(k)):
                break
            H = np.eye(k)
            continue
        gn = gradient(xn)
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(k) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        moved = abs(fx - fn)
        x, fx, g = xn, fn, gn
        if moved == 0.0 and np.linalg.norm(s) == 0.0:
            break
    return BfgsResult(x, fx, it, converged)


# --------------------------------------------------------------------------- grey wolf


@dataclass
class GwoConfig:
    population: int = 50
    iterations: int = 80
    seed: int = 0

    def __post_init__(self):
        if self.population < 3:
            raise ValueError("GWO needs at least 3 agents")
        if self.iterations < 1:
            raise ValueError("GWO needs at least 1 iteration")


def _clean(fitness: np.ndarray) -> np.ndarray:
    fitness = np.asarray(fitness, dtype=np.float64)
    return np.where(np.isfinite(fitness), fitness, -np.inf)


def gwo_step(positions: np.ndarray, fitness: np.ndarray, a: float, rng: np.random.Generator) -> np.ndarray:
    """One GWO position update led by the three fittest agents; new positions
    are clamped to the per-dimension min/max of the current population."""
    positions = np.asarray(positions, dtype=np.float64)
    order = np.argsort(-_clean(fitness), kind="stable")
    leaders = positions[order[:3]]
    lo, hi = positions.min(axis=0), positions.max(axis=0)
    p, d = positions.shape
    moves = np.zeros((3, p, d))
    for j in range(3):
        r1 = rng.random((p, d))
        r2 = rng.random((p, d))
        A = 2 * a * r1 - a
        C = 2 * r2
        dist = np.abs(C * leaders[j] - positions)
        moves[j] = leaders[j] - A * dist
    return np.clip(moves.mean(axis=0), lo, hi)


@dataclass
class GwoResult:
    x: np.ndarray
    f: float
    history: list = field(default_factory=list)


def gwo_optimize(fitness: Callable[[np.ndarray], float], population, cfg: GwoConfig = GwoConfig()) -> GwoResult:
    """Maximize ``fitness`` starting from ``population`` (P x d)."""
    pos = np.array(population, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[0] != cfg.population:
        raise ValueError(f"initial population must have {cfg.population} rows, got shape {pos.shape}")
    rng = np.random.default_rng(cfg.seed)
    fit = _clean([fitness(p) for p in pos])
    best = int(np.argmax(fit))
    best_x, best_f = pos[best].copy(), float(fit[best])
    history = [best_f]
    for t in range(cfg.iterations):
        a = 2.0 * (1.0 - t / cfg.iterations)
        pos = gwo_step(pos, fit, a, rng)
        fit = _clean([fitness(p) for p in pos])
        i = int(np.argmax(fit))
        if fit[i] > best_f:
            best_x, best_f = pos[i].copy(), float(fit[i])
        history.append(best_f)
    return GwoResult(best_x, best_f, history)


__all__ = ["BfgsResult", "GwoConfig", "GwoResult", "StartFailure", "bfgs_minimize", "fd_gradient", "gwo_optimize", "gwo_step"]
