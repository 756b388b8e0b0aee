import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symnum import tensorcore as tc
from symnum.encoders import DualEncoder, EncoderConfig
from symnum.exprtree import SamplerConfig
from symnum.numgen import generate_corpus, generate_pair
from symnum.pretrain import (
    PretrainConfig,
    Pretrainer,
    corpus_batches,
    info_nce_loss,
    load_dual_encoder,
    lr_schedule,
    make_batch,
    pretrain_run,
    retrieval_topk,
    save_dual_encoder,
)

TINY = EncoderConfig(d_emb=16, n_layers=1, n_heads=2, max_dim=2)
S2 = SamplerConfig(d_max=2, b_max=2, u_max=1)


def oracle_info_nce(zs, zv, tau):
    # written from the definition with explicit loops
    zs = zs / np.linalg.norm(zs, axis=1, keepdims=True)
    zv = zv / np.linalg.norm(zv, axis=1, keepdims=True)
    b = len(zs)
    s = [[float(zs[i] @ zv[j]) / tau for j in range(b)] for i in range(b)]
    row = sum(-s[i][i] + math.log(sum(math.exp(s[i][j]) for j in range(b))) for i in range(b)) / b
    col = sum(-s[i][i] + math.log(sum(math.exp(s[j][i]) for j in range(b))) for i in range(b)) / b
    return (row + col) / 2


def test_orthonormal_value():
    e = np.eye(2)
    assert info_nce_loss(e, e, 1.0) == pytest.approx(0.31326, abs=1e-5)
    assert info_nce_loss(e, e, 1.0) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)


@given(st.integers(0, 2**31), st.integers(2, 8), st.floats(0.05, 2.0))
def test_matches_loop_oracle(seed, b, tau):
    rng = np.random.default_rng(seed)
    zs, zv = rng.standard_normal((b, 5)), rng.standard_normal((b, 5))
    assert info_nce_loss(zs, zv, tau) == pytest.approx(oracle_info_nce(zs, zv, tau), rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**31), st.integers(2, 8))
def test_joint_permutation_invariant(seed, b):
    rng = np.random.default_rng(seed)
    zs, zv = rng.standard_normal((b, 4)), rng.standard_normal((b, 4))
    perm = rng.permutation(b)
    assert info_nce_loss(zs[perm], zv[perm], 0.3) == pytest.approx(info_nce_loss(zs, zv, 0.3), rel=1e-9)
    assert info_nce_loss(zs, zv, 0.3) >= 0


def test_limits():
    e = np.eye(4)
    assert info_nce_loss(e, e, 1e-3) < 1e-6
    same = np.ones((5, 3))
    assert info_nce_loss(same, same, 0.1) == pytest.approx(math.log(5), rel=1e-9)
    with pytest.raises(ValueError):
        info_nce_loss(np.ones((1, 3)), np.ones((1, 3)))


def test_info_nce_grad_check():
    rng = np.random.default_rng(1)
    with tc.default_dtype(np.float64):
        zs, zv = tc.parameter(rng.standard_normal((4, 3))), tc.parameter(rng.standard_normal((4, 3)))
        assert tc.grad_check(lambda a, b: info_nce_loss(a, b, 0.1), [zs, zv], tol=1e-3).passed


def test_lr_schedule_examples():
    cfg = PretrainConfig()
    assert lr_schedule(0, cfg) == pytest.approx(1e-7)
    assert lr_schedule(cfg.warmup_steps, cfg) == pytest.approx(4e-5)
    assert lr_schedule(4 * cfg.warmup_steps, cfg) == pytest.approx(2e-5)
    assert lr_schedule(500, cfg) == pytest.approx(1e-7 + 0.5 * (4e-5 - 1e-7))


def test_retrieval_examples():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((10, 6))
    assert retrieval_topk(z, z, 1) == 1.0
    assert retrieval_topk(z, rng.standard_normal((10, 6)), 10) == 1.0
    accs = [retrieval_topk(rng.standard_normal((256, 64)), rng.standard_normal((256, 64)), 1) for _ in range(20)]
    assert abs(np.mean(accs) - 1 / 256) < 0.02
    with pytest.raises(ValueError):
        retrieval_topk(z, z, 11)


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(temperature=0)
    with pytest.raises(ValueError):
        PretrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        PretrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        PretrainConfig(encoder=TINY)  # default sampler reaches D=3


def _pairs(n, seed=0, points=10):
    rng = np.random.default_rng(seed)
    return [generate_pair(rng, SamplerConfig(d_max=2, b_max=2, u_max=1), n_points=points, max_tokens=62) for _ in range(n)]


def test_overfit_monotone_100_steps():
    pairs = _pairs(64)
    tr = Pretrainer(PretrainConfig(batch_size=64, peak_lr=3e-4, warmup_steps=1, encoder=TINY, sampler=S2))
    batch = make_batch(pairs, TINY)
    losses = [tr.train_step(batch).loss for _ in range(100)]
    assert np.all(np.diff(losses) < 0)


def test_zero_steps_and_checkpoint_roundtrip(tmp_path):
    cfg = PretrainConfig(batch_size=4, epochs=0, encoder=TINY, sampler=S2, min_points=8, max_points=8, seed=3)
    tr = pretrain_run(cfg, out=tmp_path / "enc.ckpt")
    init = DualEncoder(TINY, 3).state_dict()
    model, config = load_dual_encoder(tmp_path / "enc.ckpt")
    assert config["kind"] == "dual_encoder"
    for k, v in init.items():
        np.testing.assert_array_equal(model.state_dict()[k], v)
    assert tr.history == []


def test_same_seed_same_curve(tmp_path):
    cfg = PretrainConfig(batch_size=4, steps_per_epoch=5, encoder=TINY, sampler=S2, min_points=8, max_points=12, seed=4, peak_lr=1e-3, warmup_steps=2)
    a = pretrain_run(cfg, metrics_path=tmp_path / "a.csv")
    b = pretrain_run(cfg, metrics_path=tmp_path / "b.csv")
    assert [h.loss for h in a.history] == [h.loss for h in b.history]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_fixed_corpus_toy_run():
    # 2,048-pair fixed corpus, d_emb=32, B=32, 500 steps: the loss goes down
    corpus = generate_corpus(2048, 0, SamplerConfig(d_max=2, b_max=2, u_max=1), n_points=16, max_tokens=62)
    enc = EncoderConfig(d_emb=32, n_layers=2, n_heads=4, max_dim=2)
    cfg = PretrainConfig(batch_size=32, steps_per_epoch=500, peak_lr=1e-3, warmup_steps=100, encoder=enc, sampler=S2, seed=0)
    tr = pretrain_run(cfg, corpus=corpus)
    losses = [h.loss for h in tr.history]
    assert np.mean(losses[-50:]) < np.mean(losses[:10])


def test_corpus_batches_share_point_count():
    corpus = generate_corpus(12, 1, SamplerConfig(d_max=1, b_max=1, u_max=1), n_points=9)
    batch = next(corpus_batches(corpus, 5, np.random.default_rng(0)))
    assert len(batch) == 5 and len({ds.n for _, ds in batch}) == 1


def test_learnable_temperature_saved(tmp_path):
    cfg = PretrainConfig(batch_size=4, steps_per_epoch=2, encoder=TINY, sampler=S2, min_points=8, max_points=8, learn_temperature=True)
    tr = pretrain_run(cfg)
    save_dual_encoder(tmp_path / "t.ckpt", tr.model, cfg, tr.log_scale)
    arrays, _ = tc.load_checkpoint(tmp_path / "t.ckpt")
    assert "log_scale" in arrays
