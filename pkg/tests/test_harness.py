import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symnum.encoders import DualEncoder, EncoderConfig
from symnum.exprtree import SamplerConfig, from_prefix
from symnum.harness import (
    GROUND_TRUTH,
    DimensionError,
    EvalRecord,
    MalformedCSV,
    add_noise,
    evaluate_suite,
    export_embeddings,
    load_dataset,
    method_ranks,
    pareto_fronts,
    save_dataset,
    solution_rate,
    split,
)
from symnum.numgen import NumericDataset, generate_corpus
from symnum.properties import PROPERTY_NAMES


def write_csv(path, header, rows):
    path.write_text("\n".join([",".join(header)] + [",".join(map(str, r)) for r in rows]) + "\n")
    return path


def test_load_shape(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "b", "y"], [[i, 2 * i, 3 * i + 100] for i in range(10)])
    ds = load_dataset(p)
    assert (ds.n, ds.dim) == (10, 2)
    assert ds.y[0] == 100.0  # raw, not normalized


def test_load_too_many_features(tmp_path):
    p = write_csv(tmp_path / "a.csv", [f"x{i}" for i in range(12)] + ["y"], [list(range(13))])
    with pytest.raises(DimensionError):
        load_dataset(p, d_max=10)


def test_load_nan_names_cell(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "b", "y"], [[1, 2, 3], [4, "nan", 6]])
    with pytest.raises(MalformedCSV, match=r"row 3.*'b'"):
        load_dataset(p)
    p = write_csv(tmp_path / "b.csv", ["a", "y"], [[1, "oops"]])
    with pytest.raises(MalformedCSV, match=r"row 2.*'y'"):
        load_dataset(p)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = NumericDataset(rng.normal(size=(7, 3)), rng.normal(size=7))
    save_dataset(tmp_path / "d.csv", ds)
    back = load_dataset(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)


def test_split_counts_and_partition():
    x = np.arange(100, dtype=float).reshape(-1, 1)
    ds = NumericDataset(x, x[:, 0] * 10)
    tr, te = split(ds, 0.75, seed=3)
    assert (tr.n, te.n) == (75, 25)
    got = np.sort(np.concatenate([tr.x[:, 0], te.x[:, 0]]))
    np.testing.assert_array_equal(got, x[:, 0])
    tr2, _ = split(ds, 0.75, seed=3)
    np.testing.assert_array_equal(tr.x, tr2.x)
    np.testing.assert_array_equal(tr.y, tr.x[:, 0] * 10)


def test_noise_identity_and_scale(goldens):
    y = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(add_noise(y, 0.0, np.random.default_rng(0)), y)
    np.testing.assert_allclose(add_noise(y, 0.1, np.random.default_rng(5)), goldens["add_noise_seed5"], rtol=0, atol=1e-12)
    y = np.random.default_rng(1).normal(3.0, 2.0, 10_000)
    eps = add_noise(y, 0.05, np.random.default_rng(2)) - y
    rms = math.sqrt(np.mean(y**2))
    assert abs(eps.std() / (0.05 * rms) - 1) < 0.05
    with pytest.raises(ValueError):
        add_noise(y, -0.1, np.random.default_rng(0))


def test_solution_rate():
    assert solution_rate([1.0, 0.5, 0.995]) == pytest.approx(2 / 3)
    assert solution_rate([0.1, 0.2]) == 0
    assert solution_rate([0.1, -math.inf], threshold=-math.inf) == 0.5  # -inf itself is not > -inf
    assert solution_rate([0.1, -5.0], threshold=-math.inf) == 1
    assert solution_rate([0.99]) == 0  # strictly greater


def test_pareto_examples():
    assert pareto_fronts([(1, 3), (2, 1), (3, 2)]) == [1, 1, 2]
    assert pareto_fronts([(4, 4)]) == [1]
    assert pareto_fronts([(2, 2), (2, 2), (3, 3)]) == [1, 1, 2]
    with pytest.raises(ValueError):
        pareto_fronts([(1, math.nan)])


@given(st.lists(st.tuples(st.integers(1, 6), st.integers(1, 6)), min_size=1, max_size=12))
def test_pareto_brute_force(points):
    fronts = pareto_fronts(points)
    assert len(fronts) == len(points) and min(fronts) == 1

    def dom(a, b):
        return a[0] <= b[0] and a[1] <= b[1] and a != b

    # peel by brute force
    left = set(range(len(points)))
    level = 0
    while left:
        level += 1
        top = {i for i in left if not any(dom(points[j], points[i]) for j in left)}
        for i in top:
            assert fronts[i] == level
        left -= top
    for i, j in itertools.combinations(range(len(points)), 2):
        if fronts[i] == fronts[j] == 1:
            assert not dom(points[i], points[j]) and not dom(points[j], points[i])


def test_method_ranks():
    recs = [
        EvalRecord("d1", "a", 0.9, 5, 0.0),
        EvalRecord("d1", "b", 0.5, 3, 0.0),
        EvalRecord("d2", "a", 0.7, 4, 0.0),
        EvalRecord("d2", "b", 0.7, 9, 0.0),
        EvalRecord("d3", "a", -math.inf, 2, 0.0),
        EvalRecord("d3", "b", 0.1, 2, 0.0),
    ]
    r = method_ranks(recs)
    # a: acc ranks 1, 1.5, 2 ; comp ranks 2, 1, 1.5
    assert r["a"] == (1.5, 1.5)
    assert r["b"] == (1.5, 1.5)
    assert EvalRecord("d", "m", -math.inf, 1, 0.0).r2_clipped == 0.0
    assert EvalRecord("d", "m", -3.0, 1, 0.0).r2_clipped == 0.0


def test_suite_shape():
    assert len(GROUND_TRUTH) == 12
    assert {g.dim for g in GROUND_TRUTH} <= {1, 2, 3}
    rng = np.random.default_rng(0)
    for g in GROUND_TRUTH:
        ds = g.sample(50, rng)
        assert np.all(np.isfinite(ds.y))


def test_evaluate_suite_keeps_test_clean():
    seen = []

    def fit(train):
        seen.append(train)
        return None, 0

    suite = GROUND_TRUTH[:3]
    recs = evaluate_suite(fit, "none", suite, gamma=0.5, seed=0, n_points=40)
    assert [r.dataset for r in recs] == [g.name for g in suite]
    assert all(r.r2 == -math.inf and r.r2_clipped == 0 for r in recs)
    for g, train in zip(suite, seen):
        assert train.n == 30
        # noisy targets differ from the clean function on train
        assert not np.allclose(train.y, g.fn(train.x))

    # a perfect oracle scores R^2 == 1 on the held-out quarter even with train noise
    def perfect(train):
        return from_prefix(["add", "mul", "+", "2500", "E-3", "x0", "+", "1000", "E-3"]), 5

    recs = evaluate_suite(perfect, "oracle", GROUND_TRUTH[:1], gamma=0.3, seed=1, n_points=40)
    assert recs[0].r2 == pytest.approx(1.0, abs=1e-12)


def test_export_embeddings(tmp_path):
    cfg = EncoderConfig(d_emb=8, n_layers=1, n_heads=2, max_dim=2)
    enc = DualEncoder(cfg, seed=0)
    recs = generate_corpus(5, seed=0, sampler_cfg=SamplerConfig(d_max=1, b_max=2, u_max=1), n_points=20)
    out = tmp_path / "e.csv"
    assert export_embeddings(recs, enc, out) == 5
    lines = out.read_text().splitlines()
    assert len(lines) == 6
    assert all(len(l.split(",")) == 1 + 8 + len(PROPERTY_NAMES) for l in lines)
    first = out.read_bytes()
    export_embeddings(recs, enc, out)
    assert out.read_bytes() == first
