import numpy as np
import pytest
from hypothesis import given, strategies as st

from symnum.exprtree import Expression, Op, SamplerConfig, Var, from_prefix, to_text
from symnum.numgen import (
    GenerationError,
    GenStats,
    NormalizeError,
    NumericDataset,
    generate_corpus,
    generate_pair,
    normalize_targets,
    read_corpus,
    record_to_pair,
    sample_clusters,
    sample_inputs,
    write_corpus,
)

seeds = st.integers(0, 2**32 - 1)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_targets([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_targets([0, 1]), [0, 1])
    with pytest.raises(NormalizeError):
        normalize_targets([5, 5, 5])


def test_golden_inputs(goldens):
    x = sample_inputs(np.random.default_rng(3), 2, 8, 2)
    np.testing.assert_allclose(x, goldens["inputs_seed3"], rtol=0, atol=1e-12)


def test_golden_pair(goldens):
    e, ds = generate_pair(np.random.default_rng(11))
    g = goldens["pair_seed11"]
    assert to_text(e) == g["expr"]
    assert (ds.n, ds.dim) == (g["n"], g["dim"])
    np.testing.assert_allclose(ds.x[:5], g["x_head"], atol=1e-12)
    np.testing.assert_allclose(ds.y[:5], g["y_head"], atol=1e-12)


@given(seeds, st.integers(1, 4), st.integers(2, 300), st.integers(1, 4))
def test_inputs_standardized(seed, d, n, k_max):
    x = sample_inputs(np.random.default_rng(seed), d, n, k_max)
    assert x.shape == (n, d)
    assert np.all(np.abs(x.mean(0)) < 1e-9)
    std = x.std(0)
    # a column can only be constant if every draw coincided; never in practice
    assert np.all(np.abs(std - 1) < 1e-6)


@given(seeds, st.integers(1, 5), st.integers(1, 500))
def test_cluster_counts_sum(seed, k_max, n):
    spec = sample_clusters(np.random.default_rng(seed), 2, k_max)
    c = spec.counts(n)
    assert c.sum() == n and np.all(c >= 0)
    assert 1 <= spec.k <= k_max
    assert abs(spec.weights.sum() - 1) < 1e-12
    assert np.all((spec.spreads > 0) & (spec.spreads <= 1))


@given(seeds)
def test_pair_pretraining_mode(seed):
    e, ds = generate_pair(np.random.default_rng(seed), SamplerConfig(d_max=3, b_max=3, u_max=2), n_points=40)
    assert np.all(np.isfinite(ds.y)) and ds.y.min() == 0 and ds.y.max() == 1
    assert ds.dim == e.input_dim and ds.normalized_y


@given(seeds)
def test_pair_reproducible(seed):
    cfg = SamplerConfig(d_max=2, b_max=2, u_max=2)
    a = generate_pair(np.random.default_rng(seed), cfg, n_points=30, normalize_y=False)
    b = generate_pair(np.random.default_rng(seed), cfg, n_points=30, normalize_y=False)
    assert to_text(a[0]) == to_text(b[0])
    np.testing.assert_array_equal(a[1].y, b[1].y)


def test_restart_path_counts():
    # log(-x0^2 - 1) is undefined everywhere: every attempt must be discarded
    bad = Expression(Op("log", (Op("sub", (Op("mul", (Op("pow2", (Var(0),)), from_prefix("- 1000 E-3").root)), from_prefix("+ 1000 E-3").root)),)), 1)
    stats = GenStats()
    with pytest.raises(GenerationError):
        generate_pair(np.random.default_rng(0), max_restarts=3, stats=stats, sample_fn=lambda r, c: bad)
    assert stats.restarts == 3
    assert stats.resampled_points > 0


def test_restart_then_success():
    good = from_prefix("add x0 + 1000 E0")
    bad = from_prefix("log sub - 1000 E0 pow2 x0")
    calls = iter([bad, bad, good])
    stats = GenStats()
    e, ds = generate_pair(np.random.default_rng(0), n_points=20, stats=stats, sample_fn=lambda r, c: next(calls))
    assert e == good and stats.restarts == 2


def test_constant_target_discarded():
    const = from_prefix("mul + 0 E0 x0")
    calls = iter([const, from_prefix("x0")])
    stats = GenStats()
    e, _ = generate_pair(np.random.default_rng(0), n_points=20, stats=stats, sample_fn=lambda r, c: next(calls))
    assert to_text(e) == "x0" and stats.restarts == 1


def test_corpus_roundtrip_and_worker_independence(tmp_path):
    cfg = SamplerConfig(d_max=2, b_max=2, u_max=1)
    one = generate_corpus(6, 5, cfg, n_points=16)
    two = generate_corpus(6, 5, cfg, n_points=16, workers=2)
    assert one == two
    path = tmp_path / "c.jsonl"
    write_corpus(path, one)
    back = list(read_corpus(path))
    assert back == one
    e, ds = record_to_pair(back[0])
    assert ds.n == 16 and ds.dim == e.input_dim


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        NumericDataset(np.zeros((2, 1)), np.array([0.0, np.nan]))
