import math

import numpy as np
import pytest

import symnum.lso as lso
from symnum.encoders import EncoderConfig
from symnum.lso import LsoConfig, evaluate_agents, init_population, regress, run_lso, subsample_size
from symnum.numgen import NumericDataset
from symnum.srgen import DecoderConfig, RefineCache, SRModel
from symnum.tokens import VOCAB

ENC = EncoderConfig(d_emb=16, n_layers=1, n_heads=2, max_dim=2)
DEC = DecoderConfig(d_emb=16, n_layers=1, n_heads=2, prefix_len=4, max_len=24)
BOS, EOS = VOCAB.words[VOCAB.bos_id], VOCAB.words[VOCAB.eos_id]


@pytest.fixture(scope="module")
def model():
    return SRModel(ENC, DEC, seed=0)


def data(n=40, seed=0, f=lambda x: 2 * x[:, 0] + 1):
    x = np.random.default_rng(seed).uniform(-2, 2, (n, 1))
    return NumericDataset(x, f(x))


def fixed_decoder(streams):
    def fake(model, z, input_dim, temperature, rng, max_len=None):
        return [list(streams[i % len(streams)]) for i in range(len(z))]

    return fake


def test_subsample_rule():
    assert subsample_size(300) == 150
    assert subsample_size(1000) == 200
    assert subsample_size(400) == 200
    assert subsample_size(401) == 200


def test_population_sizes(model):
    pop = init_population(data(), model, LsoConfig(), np.random.default_rng(0))
    assert pop.z.shape == (50, 16)
    assert pop.sizes() == (15, 10, 25)
    pop = init_population(data(), model, LsoConfig(p1=4, p2=0, p3=2), np.random.default_rng(0))
    assert pop.sizes() == (4, 0, 2)


def test_zero_noise_collapses_to_base(model):
    pop = init_population(data(), model, LsoConfig(noise_scale=0.0), np.random.default_rng(1))
    for row in pop.z[pop.groups != 1]:
        np.testing.assert_allclose(row, pop.base, atol=1e-6)


def test_population_needs_points(model):
    with pytest.raises(ValueError):
        init_population(data(n=3), model, LsoConfig(), np.random.default_rng(0))


def test_fitness_sentinel_and_perfect(model, monkeypatch):
    ds = data()
    cfg = LsoConfig(b=2)
    z = np.zeros((2, 16))
    monkeypatch.setattr(lso, "decode", fixed_decoder([[BOS, "add", "x0"]]))
    out = evaluate_agents(z, ds, model, cfg, np.random.default_rng(0), RefineCache(ds))
    assert all(a.fitness == -math.inf and a.best is None for a in out)
    monkeypatch.setattr(lso, "decode", fixed_decoder([[BOS, "add", "mul", "+", "1000", "E-3", "x0", "+", "1000", "E-3", EOS]]))
    out = evaluate_agents(z, ds, model, cfg, np.random.default_rng(0), RefineCache(ds))
    assert all(a.fitness == pytest.approx(1.0, abs=1e-9) for a in out)


def test_duplicate_skeletons_refined_once(model, monkeypatch):
    ds = data()
    streams = [
        [BOS, "add", "mul", "+", "1000", "E-3", "x0", "+", "1000", "E-3", EOS],
        [BOS, "add", "mul", "-", "4000", "E-3", "x0", "+", "7000", "E-3", EOS],
    ]
    monkeypatch.setattr(lso, "decode", fixed_decoder(streams))
    cache = RefineCache(ds)
    evaluate_agents(np.zeros((1, 16)), ds, model, LsoConfig(b=2), np.random.default_rng(0), cache)
    assert cache.calls == 1


def test_early_stop_and_trace(model, monkeypatch):
    monkeypatch.setattr(lso, "decode", fixed_decoder([[BOS, "add", "mul", "+", "1000", "E-3", "x0", "+", "1000", "E-3", EOS]]))
    res = run_lso(data(), model, LsoConfig(iterations=10))
    assert res.stopped_early and res.iterations == 1
    assert res.best.r2 > 0.99


def test_degenerate_run(model, monkeypatch):
    monkeypatch.setattr(lso, "decode", fixed_decoder([[BOS, "sin"]]))
    res = run_lso(data(), model, LsoConfig(iterations=3))
    assert res.degenerate and res.best is None and res.trace == [-math.inf] * 3


def test_minus_inf_threshold_stops_at_first(model):
    res = run_lso(data(), model, LsoConfig(iterations=5, r2_stop=-math.inf, p1=3, p2=2, p3=3))
    assert res.iterations == 1 and len(res.trace) == 1


def test_real_run_monotone_and_deterministic(model):
    cfg = LsoConfig(iterations=4, p1=3, p2=2, p3=3, r2_stop=1.0)
    a = run_lso(data(), model, cfg)
    b = run_lso(data(), model, cfg)
    assert all(y >= x for x, y in zip(a.trace, a.trace[1:]))
    assert a.trace == b.trace
    assert (a.best is None) == (b.best is None)
    if a.best is not None:
        assert a.best.key == b.best.key


def test_regress_returns_raw_coordinates(model, monkeypatch):
    # the decoder proposes a line in standardized x; the answer must hold on raw x
    monkeypatch.setattr(lso, "decode", fixed_decoder([[BOS, "add", "mul", "+", "1000", "E-3", "x0", "+", "1000", "E-3", EOS]]))
    x = np.linspace(10, 20, 30).reshape(-1, 1)
    ds = NumericDataset(x, 3 * x[:, 0] - 4)
    for use in (True, False):
        r = regress(ds, model, use, LsoConfig(iterations=2))
        from symnum.exprtree import evaluate_batch

        np.testing.assert_allclose(evaluate_batch(r.expression, x), ds.y, rtol=1e-6, atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        LsoConfig(r2_stop=1.5)
    with pytest.raises(ValueError):
        LsoConfig(p1=1, p2=0, p3=1)
    assert LsoConfig().population == 50
