"""Latent-space search: a population of numeric latents is decoded into
candidate expressions, scored on the data, and moved by Grey Wolf updates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import encode_numeric
from .exprtree import Expression, unstandardize
from .numgen import NumericDataset
from .numopt import gwo_step
from .srgen import Candidate, RefineCache, SRModel, decode, dedup, parse_candidate


@dataclass
class LsoConfig:
    p1: int = 15
    p2: int = 10
    p3: int = 25
    b: int = 2
    iterations: int = 80
    r2_stop: float = 0.99
    p2_noise: float = 0.01  # sigma_i = i * p2_noise * std(y)
    p3_noise: tuple = (0.01, 0.5)  # sigma_i ~ U(lo, hi) * rms(z)
    noise_scale: float = 1.0
    temperature: float = 0.7
    refine_iter: int = 100
    seed: int = 0

    def __post_init__(self):
        if min(self.p1, self.p2, self.p3) < 0 or self.population < 3:
            raise ValueError("population groups must be non-negative and sum to at least 3")
        if not self.r2_stop <= 1:
            raise ValueError("r2_stop must be <= 1")
        if self.iterations < 1 or self.b < 1:
            raise ValueError("need iterations >= 1 and b >= 1")

    @property
    def population(self) -> int:
        return self.p1 + self.p2 + self.p3


def subsample_size(n: int) -> int:
    """200 points for large sets, otherwise half of them."""
    return 200 if n > 400 else n // 2


@dataclass
class Population:
    z: np.ndarray  # (P, d)
    groups: np.ndarray  # 1, 2 or 3 per agent
    base: np.ndarray  # latent of the fixed base sample

    def sizes(self) -> tuple[int, int, int]:
        return tuple(int((self.groups == g).sum()) for g in (1, 2, 3))


def init_population(ds: NumericDataset, model: SRModel, cfg: LsoConfig, rng: np.random.Generator) -> Population:
    """P1: encodings of random subsamples. P2: encodings of the base sample
    with Gaussian noise on y, scale growing with the agent index. P3: the base
    encoding plus latent noise of random scale."""
    if ds.n < 4:
        raise ValueError("latent search needs at least 4 points")
    n = subsample_size(ds.n)
    enc = model.enc_v
    base_ds = ds.subset(np.sort(rng.permutation(ds.n)[:n]))
    sets = [ds.subset(np.sort(rng.choice(ds.n, n, replace=False))) for _ in range(cfg.p1)]
    std_y = float(np.std(base_ds.y))
    for i in range(1, cfg.p2 + 1):
        sigma = i * cfg.p2_noise * std_y * cfg.noise_scale
        sets.append(NumericDataset(base_ds.x, base_ds.y + sigma * rng.standard_normal(n)))
    z_sets = encode_numeric(sets, enc) if sets else np.zeros((0, enc.cfg.d_emb))
    z_base = encode_numeric(base_ds, enc)
    rms = float(np.sqrt(np.mean(z_base**2)))
    lo, hi = cfg.p3_noise
    sig3 = rng.uniform(lo, hi, cfg.p3) * rms * cfg.noise_scale
    z3 = z_base[None, :] + sig3[:, None] * rng.standard_normal((cfg.p3, z_base.size))
    z = np.concatenate([z_sets, z3], axis=0)
    groups = np.repeat([1, 2, 3], [cfg.p1, cfg.p2, cfg.p3])
    return Population(z, groups, z_base)


@dataclass
class AgentResult:
    fitness: float
    best: Candidate | None


def evaluate_agents(z: np.ndarray, ds: NumericDataset, model: SRModel, cfg: LsoConfig, rng: np.random.Generator, cache: RefineCache) -> list[AgentResult]:
    """Decode ``b`` candidates per agent, refine constants, keep the best R^2."""
    p = z.shape[0]
    streams = decode(model, np.repeat(z, cfg.b, axis=0), ds.dim, cfg.temperature, rng)
    out = []
    for a in range(p):
        cands = [c for c in (parse_candidate(s, ds.dim) for s in streams[a * cfg.b : (a + 1) * cfg.b]) if c is not None]
        best: Candidate | None = None
        for c in dedup(cands):
            r = cache.refine(c)
            if best is None or r.r2 > best.r2:
                best = r
        out.append(AgentResult(best.r2 if best is not None else -math.inf, best))
    return out


@dataclass
class LsoResult:
    best: Candidate | None
    trace: list = field(default_factory=list)
    iterations: int = 0
    stopped_early: bool = False
    degenerate: bool = False
    refinements: int = 0


def run_lso(ds: NumericDataset, model: SRModel, cfg: LsoConfig = LsoConfig()) -> LsoResult:
    """Search the latent space for an expression fitting ``ds``.

    ``trace`` holds the best-so-far train R^2 after each iteration.
    """
    rng = np.random.default_rng(cfg.seed)
    pop = init_population(ds, model, cfg, rng)
    cache = RefineCache(ds, cfg.refine_iter)
    z = pop.z
    best: Candidate | None = None
    best_f = -math.inf
    result = LsoResult(None)
    for t in range(cfg.iterations):
        agents = evaluate_agents(z, ds, model, cfg, rng, cache)
        fit = np.array([a.fitness for a in agents])
        i = int(np.argmax(fit))
        if agents[i].best is not None and (best is None or fit[i] > best_f):
            best, best_f = agents[i].best, float(fit[i])
        result.trace.append(best_f)
        result.iterations = t + 1
        if best_f > cfg.r2_stop or cfg.r2_stop == -math.inf:
            result.stopped_early = True
            break
        if t + 1 < cfg.iterations:
            z = gwo_step(z, fit, 2.0 * (1.0 - t / cfg.iterations), rng)
    result.best = best
    result.degenerate = best is None
    result.refinements = cache.calls
    return result


# --------------------------------------------------------------------------- end-to-end regression


@dataclass
class RegressResult:
    expression: Expression | None
    train_r2: float
    complexity: int
    lso: LsoResult | None = None


def _standardizer(x: np.ndarray):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def regress(ds: NumericDataset, model: SRModel, use_lso: bool = True, cfg: LsoConfig = LsoConfig()) -> RegressResult:
    """Fit an expression to raw data.

    Inputs are standardized for encoding and fitting; the chosen expression
    is rewritten in terms of the raw inputs before it is returned.
    """
    mean, std = _standardizer(ds.x)
    zds = NumericDataset((ds.x - mean) / std, ds.y, x_standardized=True)
    if use_lso:
        res = run_lso(zds, model, cfg)
        best, trace = res.best, res
    else:
        rng = np.random.default_rng(cfg.seed)
        sub = zds.subset(np.sort(rng.permutation(zds.n)[: max(subsample_size(zds.n), min(zds.n, 2))]))
        z = encode_numeric(sub, model.enc_v)
        cache = RefineCache(zds, cfg.refine_iter)
        agents = evaluate_agents(z[None, :], zds, model, cfg, rng, cache)
        best, trace = agents[0].best, None
    if best is None:
        return RegressResult(None, -math.inf, 0, trace)
    expr = unstandardize(best.expression, mean, std)
    return RegressResult(expr, best.r2, best.complexity, trace)


__all__ = [
    "AgentResult",
    "LsoConfig",
    "LsoResult",
    "Population",
    "RegressResult",
    "evaluate_agents",
    "init_population",
    "regress",
    "run_lso",
    "subsample_size",
]
