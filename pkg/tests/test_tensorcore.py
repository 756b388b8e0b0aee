import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symnum import tensorcore as tc

F64 = np.float64


def p(rng, *shape):
    return tc.parameter(rng.standard_normal(shape))


@pytest.fixture(autouse=True)
def float64():
    with tc.default_dtype(F64):
        yield


def sq(t):
    return tc.sum_(tc.mul(t, t))


def weighted(t, seed=9):
    # random linear read-out so gradients are not trivially symmetric
    w = tc.tensor(np.random.default_rng(seed).standard_normal(t.shape))
    return tc.sum_(tc.mul(t, w))


PRIMITIVES = {
    "add": (lambda a, b: weighted(tc.add(a, b)), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: weighted(tc.add(a, b)), [(2, 3, 4), (4,)]),
    "sub": (lambda a, b: weighted(tc.sub(a, b)), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: weighted(tc.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: weighted(tc.scale(a, -2.5)), [(5,)]),
    "scale_by": (lambda a, s: weighted(tc.scale_by(a, s)), [(3, 2), ()]),
    "exp": (lambda a: weighted(tc.exp(a)), [(4, 3)]),
    "relu": (lambda a: weighted(tc.relu(a)), [(4, 3)]),
    "matmul": (lambda a, b: weighted(tc.matmul(a, b)), [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: weighted(tc.matmul(a, b)), [(2, 3, 4), (2, 4, 5)]),
    "matmul_shared": (lambda a, b: weighted(tc.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a: weighted(tc.transpose(a, (2, 0, 1))), [(2, 3, 4)]),
    "reshape": (lambda a: weighted(tc.reshape(a, (6, 4))), [(2, 3, 4)]),
    "concat": (lambda a, b: weighted(tc.concat([a, b], axis=1)), [(2, 3), (2, 5)]),
    "sum_axis": (lambda a: weighted(tc.sum_(a, axis=1)), [(3, 4, 2)]),
    "mean": (lambda a: weighted(tc.mean(a, axis=0)), [(3, 4)]),
    "softmax": (lambda a: weighted(tc.softmax(a)), [(3, 5)]),
    "softmax_masked": (lambda a: weighted(tc.softmax(a, np.array([0, 0, -1e9, 0, -1e9]))), [(3, 5)]),
    "layer_norm": (lambda a, g, b: weighted(tc.layer_norm(a, g, b)), [(3, 6), (6,), (6,)]),
    "l2_normalize": (lambda a: weighted(tc.l2_normalize(a)), [(4, 3)]),
    "take_rows": (lambda a: weighted(tc.take_rows(a, np.array([2, 0, 2]))), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_grad_check(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    inputs = [p(rng, *s) for s in shapes]
    rep = tc.grad_check(fn, inputs, tol=1e-5)
    assert rep.passed, str(rep)


def test_embedding_and_cross_entropy_grad_check():
    rng = np.random.default_rng(1)
    table = p(rng, 7, 3)
    ids = np.array([[1, 3, 1], [6, 0, 3]])
    assert tc.grad_check(lambda t: weighted(tc.embedding_lookup(t, ids)), [table], tol=1e-5).passed
    logits = p(rng, 4, 6)
    t = np.array([0, 5, 2, 2])
    assert tc.grad_check(lambda z: tc.cross_entropy_with_logits(z, t), [logits], tol=1e-5).passed
    assert tc.grad_check(lambda z: tc.cross_entropy_with_logits(z, t, np.array([0.1, 0, 0.5, 0.4])), [logits], tol=1e-5).passed


def test_three_layer_composite():
    rng = np.random.default_rng(2)
    x = tc.tensor(rng.standard_normal((5, 4)))
    ws = [p(rng, 4, 6), p(rng, 6, 6), p(rng, 6, 1)]

    def f(w1, w2, w3):
        h = tc.relu(tc.matmul(x, w1))
        h = tc.layer_norm(tc.matmul(h, w2))
        return tc.mean(tc.exp(tc.scale(tc.matmul(h, w3), 0.1)))

    assert tc.grad_check(f, ws, tol=1e-3).passed


def test_corrupted_backward_fails():
    rng = np.random.default_rng(3)
    a = p(rng, 3, 3)

    def bad_relu(t):
        return tc.record(np.maximum(t.data, 0), (t,), lambda g: (g,))  # wrong: ignores the mask

    assert not tc.grad_check(lambda t: weighted(bad_relu(t)), [a]).passed


def test_quadratic_form_tight():
    rng = np.random.default_rng(4)
    m = rng.standard_normal((4, 4))
    A = tc.tensor(m @ m.T)
    w = p(rng, 4, 1)
    rep = tc.grad_check(lambda v: tc.sum_(tc.mul(v, tc.matmul(A, v))), [w], tol=1e-5)
    assert rep.passed


def test_examples():
    np.testing.assert_allclose(tc.softmax(tc.tensor(np.zeros(2))).data, [0.5, 0.5])
    a = np.random.default_rng(0).standard_normal((3, 2))
    np.testing.assert_allclose(tc.matmul(tc.tensor(np.eye(3)), tc.tensor(a)).data, a)
    np.testing.assert_allclose(tc.layer_norm(tc.tensor(np.full((1, 5), 3.0))).data, 0.0)
    w = tc.parameter(np.array([1.0, 2.0]))
    tc.backward(tc.sum_(tc.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2, 4])
    u = tc.parameter(np.array([1.0, 2.0]))
    tc.backward(tc.sum_(tc.mul(tc.tensor(np.ones(2)), tc.tensor(np.ones(2)))))
    assert u.grad is None or np.all(u.grad == 0)


def test_backward_needs_scalar():
    w = tc.parameter(np.ones(3))
    with pytest.raises(Exception):
        tc.backward(tc.mul(w, w))


def test_shape_errors():
    with pytest.raises(tc.ShapeError):
        tc.matmul(tc.tensor(np.ones((2, 3))), tc.tensor(np.ones((2, 3))))
    with pytest.raises(tc.ShapeError):
        tc.add(tc.tensor(np.ones((2, 3))), tc.tensor(np.ones((3, 2))))


def test_adam_first_step():
    w = tc.parameter(np.array([0.5]))
    w.grad = np.array([1.0])
    tc.Adam([w], lr=0.1).step()
    assert w.data[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-12)


def test_adam_zero_grad_no_move():
    w = tc.parameter(np.array([0.5, -1.0]))
    w.grad = np.zeros(2)
    tc.Adam([w], lr=0.1).step()
    np.testing.assert_array_equal(w.data, [0.5, -1.0])


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = p(rng, 3, 3)
        opt = tc.Adam([w], lr=0.01)
        for _ in range(5):
            opt.zero_grad()
            tc.backward(sq(tc.matmul(w, w)))
            opt.step()
        return w.data.copy()

    assert np.array_equal(run(), run())


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.integers(1, 5))
def test_softmax_rows_sum_to_one(vals, rows):
    with tc.default_dtype(np.float32):
        a = tc.tensor(np.tile(np.array(vals, np.float32), (rows, 1)))
        s = tc.softmax(a).data.sum(-1)
    assert np.all(np.abs(s - 1) < 1e-6)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(2, 9))
def test_cross_entropy_nonnegative(seed, n, v):
    rng = np.random.default_rng(seed)
    z = tc.tensor(rng.standard_normal((n, v)) * 5)
    assert tc.cross_entropy_with_logits(z, rng.integers(0, v, n)).item() >= 0


def test_no_grad_records_nothing():
    w = tc.parameter(np.ones(2))
    with tc.no_grad():
        out = tc.mul(w, w)
    assert not out.requires_grad


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(1.5, np.float32)}
    tc.save_checkpoint(tmp_path / "c.bin", arrays, {"kind": "x"})
    back, cfg = tc.load_checkpoint(tmp_path / "c.bin")
    assert cfg == {"kind": "x"}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        tc.load_checkpoint(tmp_path / "bad.bin")
