"""Base-10 float tokenization and the shared token vocabularies.

A real number is written as three tokens: a sign, a 4-digit mantissa and a
power-of-ten exponent, e.g. ``5.432 -> ('+', '5432', 'E-3')``.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

MANTISSA_DIGITS = 4
MIN_EXPONENT = -100
MAX_EXPONENT = 100

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SIGNS = ("+", "-")


class EncodeError(ValueError):
    """Raised when a value cannot be written as a float triplet."""


class FloatTriplet(NamedTuple):
    sign: str
    mantissa: int
    exponent: int

    def tokens(self) -> list[str]:
        return [self.sign, str(self.mantissa), f"E{self.exponent}"]


def tokenize_float(v: float) -> FloatTriplet:
    """Round ``v`` to four significant digits and split it into a triplet."""
    v = float(v)
    if not np.isfinite(v):
        raise EncodeError(f"cannot tokenize non-finite value {v!r}")
    if v == 0.0:
        return FloatTriplet("+", 0, 0)
    sign = "-" if v < 0 else "+"
    # decimal formatting rounds the exact binary value, so ties behave like
    # round-half-even on the true decimal expansion
    digits, exp10 = f"{abs(v):.{MANTISSA_DIGITS - 1}e}".split("e")
    mantissa = int(digits.replace(".", ""))
    exponent = int(exp10) - (MANTISSA_DIGITS - 1)
    if not MIN_EXPONENT <= exponent <= MAX_EXPONENT:
        raise EncodeError(f"exponent {exponent} of {v!r} outside [E{MIN_EXPONENT}, E{MAX_EXPONENT}]")
    return FloatTriplet(sign, mantissa, exponent)


def detokenize_float(t: FloatTriplet | Sequence) -> float:
    sign, mantissa, exponent = t
    if isinstance(mantissa, str):
        mantissa = int(mantissa)
    if isinstance(exponent, str):
        exponent = int(exponent.lstrip("E"))
    value = float(f"{mantissa}e{exponent}")
    return -value if sign == "-" else value


def round_sig(v: float) -> float:
    """Quantize ``v`` the same way the tokenizer does."""
    return detokenize_float(tokenize_float(v))


def tokenize_array(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized tokenization returning (sign, mantissa, exponent) index arrays.

    sign is 0 for '+' and 1 for '-'; exponent is the raw integer exponent.
    Magnitudes below 1e-97 are flushed to zero instead of failing, which is
    what the encoders want for data (the scalar path raises instead).
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise EncodeError("cannot tokenize non-finite values")
    mag = np.abs(v)
    tiny = mag < 1e-97
    safe = np.where(tiny, 1.0, mag)
    exp10 = np.floor(np.log10(safe)).astype(np.int64)
    mant = np.rint(safe / 10.0 ** (exp10 - (MANTISSA_DIGITS - 1)))
    # log10 can land one decade off near powers of ten
    low = mant < 10 ** (MANTISSA_DIGITS - 1)
    exp10 = np.where(low, exp10 - 1, exp10)
    high = mant >= 10**MANTISSA_DIGITS
    exp10 = np.where(high, exp10 + 1, exp10)
    mant = np.rint(safe / 10.0 ** (exp10 - (MANTISSA_DIGITS - 1)))
    exponent = exp10 - (MANTISSA_DIGITS - 1)
    if np.any(exponent[~tiny] > MAX_EXPONENT):
        raise EncodeError("value too large to tokenize")
    sign = (v < 0).astype(np.int64)
    mant = np.where(tiny, 0, mant).astype(np.int64)
    exponent = np.where(tiny, 0, exponent)
    sign = np.where(tiny, 0, sign)
    return sign, mant, exponent


UNARY_OPS = ("inv", "abs", "pow2", "pow3", "sqrt", "sin", "cos", "tan", "arctan", "log", "exp")
BINARY_OPS = ("add", "sub", "mul")
MAX_VARIABLES = 10


class Vocabulary:
    """Symbolic token vocabulary: specials, operators, variables, float pieces."""

    def __init__(self, max_variables: int = MAX_VARIABLES):
        self.max_variables = max_variables
        words = [PAD, BOS, EOS]
        words += list(BINARY_OPS) + list(UNARY_OPS)
        words += [f"x{i}" for i in range(max_variables)]
        words += list(SIGNS)
        words += [str(m) for m in range(10**MANTISSA_DIGITS)]
        words += [f"E{e}" for e in range(MIN_EXPONENT, MAX_EXPONENT + 1)]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.binary_ids = np.array([self.index[w] for w in BINARY_OPS])
        self.unary_ids = np.array([self.index[w] for w in UNARY_OPS])
        self.variable_ids = np.array([self.index[f"x{i}"] for i in range(max_variables)])
        self.sign_ids = np.array([self.index[s] for s in SIGNS])
        self.mantissa_offset = self.index["0"]
        self.exponent_offset = self.index[f"E{MIN_EXPONENT}"]
        self.n_mantissa = 10**MANTISSA_DIGITS
        self.n_exponent = MAX_EXPONENT - MIN_EXPONENT + 1

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as err:
            raise EncodeError(f"unknown token {err.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[int(i)] for i in ids]


class NumericVocabulary:
    """Token ids for the numeric encoder: signs, mantissas, exponents, padding."""

    def __init__(self):
        self.sign_offset = 0
        self.mantissa_offset = 2
        self.exponent_offset = self.mantissa_offset + 10**MANTISSA_DIGITS
        self.pad_id = self.exponent_offset + (MAX_EXPONENT - MIN_EXPONENT + 1)
        self.size = self.pad_id + 1

    def __len__(self) -> int:
        return self.size

    def encode_values(self, values: np.ndarray) -> np.ndarray:
        """Map an array of reals to an array of shape ``values.shape + (3,)``."""
        sign, mant, exp = tokenize_array(values)
        return np.stack(
            [sign + self.sign_offset, mant + self.mantissa_offset, exp - MIN_EXPONENT + self.exponent_offset],
            axis=-1,
        )


VOCAB = Vocabulary()
NUMERIC_VOCAB = NumericVocabulary()
