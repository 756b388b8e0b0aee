import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from symnum.tokens import (
    NUMERIC_VOCAB,
    VOCAB,
    EncodeError,
    FloatTriplet,
    detokenize_float,
    round_sig,
    tokenize_array,
    tokenize_float,
)


def test_known_triplets():
    assert tokenize_float(5.432) == FloatTriplet("+", 5432, -3)
    assert tokenize_float(0.0) == FloatTriplet("+", 0, 0)
    assert tokenize_float(-0.0001234) == FloatTriplet("-", 1234, -7)
    assert detokenize_float(("+", 5432, -3)) == 5.432
    assert detokenize_float(("+", "0", "E0")) == 0.0


def test_rounding_carries_into_exponent():
    # 9.9996 rounds up to 10.00 -> mantissa stays 4 digits
    assert tokenize_float(9.9996) == FloatTriplet("+", 1000, -2)


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan, 1e110, 1e-110])
def test_out_of_range_rejected(bad):
    with pytest.raises(EncodeError):
        tokenize_float(bad)


@given(st.floats(min_value=-1e90, max_value=1e90, allow_nan=False).filter(lambda v: v == 0 or abs(v) > 1e-90))
def test_roundtrip_bound(v):
    t = tokenize_float(v)
    assert t.mantissa == 0 or 1000 <= t.mantissa <= 9999
    assert abs(detokenize_float(t) - v) <= 5e-4 * abs(v)


@given(st.floats(min_value=-1e50, max_value=1e50, allow_nan=False).filter(lambda v: v == 0 or abs(v) > 1e-90))
def test_round_sig_idempotent(v):
    assert round_sig(round_sig(v)) == round_sig(v)


def test_array_matches_scalar():
    rng = np.random.default_rng(1)
    v = rng.standard_normal(500) * 10.0 ** rng.integers(-30, 30, 500)
    v[:3] = [0.0, 5.432, -0.0001234]
    s, m, e = tokenize_array(v)
    for i, x in enumerate(v):
        t = tokenize_float(x)
        assert ("+-"[s[i]], m[i], e[i]) == (t.sign, t.mantissa, t.exponent)


def test_vocab_roundtrip_and_ids():
    toks = [VOCAB.words[VOCAB.bos_id], "add", "x0", "sin", "x1", "+", "5432", "E-3", VOCAB.words[VOCAB.eos_id]]
    assert VOCAB.decode(VOCAB.encode(toks)) == toks
    assert len(set(VOCAB.encode(toks))) == len(toks)
    ids = NUMERIC_VOCAB.encode_values(np.array([5.432, 0.0]))
    assert ids.shape[-1] == 3
