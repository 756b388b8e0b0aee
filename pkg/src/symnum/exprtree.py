"""Random expression trees: sampling, evaluation, prefix serialization.

Trees are immutable and built from three node types: :class:`Var`,
:class:`Const` and :class:`Op`. Skeletons additionally use :class:`Placeholder`
in place of constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from .tokens import (
    BINARY_OPS,
    BOS,
    EOS,
    SIGNS,
    UNARY_OPS,
    detokenize_float,
    round_sig,
    tokenize_float,
)

ARITY = {**{op: 2 for op in BINARY_OPS}, **{op: 1 for op in UNARY_OPS}}


class ParseError(ValueError):
    """Raised when a prefix token stream does not describe a single tree."""


@dataclass(frozen=True)
class Var:
    index: int


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Placeholder:
    index: int  # 1-based, C_1..C_k


@dataclass(frozen=True)
class Op:
    name: str
    args: tuple

    def __post_init__(self):
        if self.name not in ARITY:
            raise ValueError(f"unknown operator {self.name!r}")
        if len(self.args) != ARITY[self.name]:
            raise ValueError(f"{self.name} takes {ARITY[self.name]} operands, got {len(self.args)}")


Node = Union[Var, Const, Placeholder, Op]


@dataclass(frozen=True)
class Expression:
    root: Node
    input_dim: int

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        for node in iter_nodes(self.root):
            if isinstance(node, Var) and not 0 <= node.index < self.input_dim:
                raise ValueError(f"variable x{node.index} outside input_dim={self.input_dim}")

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Skeleton:
    tree: Expression
    k: int

    def fill(self, constants: Sequence[float]) -> Expression:
        """Substitute constants for C_1..C_k."""
        if len(constants) != self.k:
            raise ValueError(f"skeleton has {self.k} constants, got {len(constants)}")
        return Expression(_fill(self.tree.root, constants), self.tree.input_dim)


@dataclass(frozen=True)
class SamplerConfig:
    d_max: int = 10
    b_max: int = 5
    u_max: int = 3
    a_lo: float = 0.01
    a_hi: float = 100.0
    unary_ops: tuple = UNARY_OPS

    def __post_init__(self):
        if self.d_max < 1 or self.b_max < 0 or self.u_max < 0:
            raise ValueError("need d_max >= 1, b_max >= 0, u_max >= 0")
        if not 0 < self.a_lo < self.a_hi:
            raise ValueError("need 0 < a_lo < a_hi")
        if not set(self.unary_ops) <= set(UNARY_OPS):
            raise ValueError(f"unknown unary operators {set(self.unary_ops) - set(UNARY_OPS)}")


# --------------------------------------------------------------------------- traversal


def iter_nodes(node: Node) -> Iterator[Node]:
    """Yield nodes in prefix order."""
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        if isinstance(n, Op):
            stack.extend(reversed(n.args))


def complexity(expr: Expression | Skeleton) -> int:
    """Number of nodes in the tree; a constant counts once."""
    tree = expr.tree if isinstance(expr, Skeleton) else expr
    return sum(1 for _ in iter_nodes(tree.root))


def constants(expr: Expression) -> list[float]:
    return [n.value for n in iter_nodes(expr.root) if isinstance(n, Const)]


def count_ops(expr: Expression) -> tuple[int, int]:
    """Return (binary, unary) operator counts."""
    binary = unary = 0
    for n in iter_nodes(expr.root):
        if isinstance(n, Op):
            if ARITY[n.name] == 2:
                binary += 1
            else:
                unary += 1
    return binary, unary


def variables(expr: Expression) -> set[int]:
    return {n.index for n in iter_nodes(expr.root) if isinstance(n, Var)}


# --------------------------------------------------------------------------- sampling


def _signed_log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    mag = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    sign = -1.0 if rng.random() < 0.5 else 1.0
    return round_sig(sign * mag)


def _affine(rng: np.random.Generator, node: Node, cfg: SamplerConfig) -> Node:
    a = _signed_log_uniform(rng, cfg.a_lo, cfg.a_hi)
    b = _signed_log_uniform(rng, cfg.a_lo, cfg.a_hi)
    return Op("add", (Op("mul", (Const(a), node)), Const(b)))


def sample_expression(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> Expression:
    """Draw a random function following the tree-construction recipe.

    Input dimension, binary-operator count and unary-operator count are drawn
    uniformly; every variable and every inserted unary operator is wrapped in
    a random affine map ``a*(.)+b``. Constants are stored already quantized to
    four significant digits so the tree and its token form describe the same
    function.
    """
    dim = int(rng.integers(1, cfg.d_max + 1))
    n_binary = int(rng.integers(dim - 1, dim + cfg.b_max + 1))

    # grow a binary shape by repeatedly splitting a random leaf slot;
    # internal nodes are mutable lists [op, left, right], None marks a leaf
    shape: list = [None]
    slots: list[tuple[list, int]] = [(shape, 0)]
    for _ in range(n_binary):
        op = BINARY_OPS[int(rng.integers(len(BINARY_OPS)))]
        holder, slot = slots.pop(int(rng.integers(len(slots))))
        node = [op, None, None]
        holder[slot] = node
        slots.extend([(node, 1), (node, 2)])

    n_leaves = n_binary + 1
    # a permutation first so every variable appears, then uniform extras
    assignment = list(rng.permutation(dim)) + [int(rng.integers(dim)) for _ in range(n_leaves - dim)]
    leaf_vars = iter(int(v) for v in rng.permutation(assignment))

    def freeze(node) -> Node:
        if node is None:
            return Var(next(leaf_vars))
        return Op(node[0], (freeze(node[1]), freeze(node[2])))

    tree = _wrap_variables(rng, freeze(shape[0]), cfg)

    n_unary = int(rng.integers(0, cfg.u_max + 1))
    for _ in range(n_unary):
        op = cfg.unary_ops[int(rng.integers(len(cfg.unary_ops)))]
        tree = _insert_unary(rng, tree, op, cfg)
    return Expression(tree, dim)


def _wrap_variables(rng: np.random.Generator, node: Node, cfg: SamplerConfig) -> Node:
    if isinstance(node, Var):
        return _affine(rng, node, cfg)
    if isinstance(node, Op):
        return Op(node.name, tuple(_wrap_variables(rng, a, cfg) for a in node.args))
    return node


def _insert_unary(rng: np.random.Generator, tree: Node, op: str, cfg: SamplerConfig) -> Node:
    """Wrap a uniformly chosen non-constant node (possibly the root) with ``op``."""
    candidates = [i for i, n in enumerate(iter_nodes(tree)) if not isinstance(n, Const)]
    target = candidates[int(rng.integers(len(candidates)))]
    counter = [0]

    def visit(node: Node) -> Node:
        here = counter[0]
        counter[0] += 1
        if here == target:
            return _affine(rng, Op(op, (node,)), cfg)
        if isinstance(node, Op):
            return Op(node.name, tuple(visit(a) for a in node.args))
        return node

    return visit(tree)


# --------------------------------------------------------------------------- evaluation

_UNARY_FUNCS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "inv": lambda v: np.where(v == 0, np.nan, 1.0 / np.where(v == 0, 1.0, v)),
    "abs": np.abs,
    "pow2": np.square,
    "pow3": lambda v: v * v * v,
    "sqrt": lambda v: np.where(v < 0, np.nan, np.sqrt(np.abs(v))),
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "arctan": np.arctan,
    "log": lambda v: np.where(v <= 0, np.nan, np.log(np.where(v <= 0, 1.0, v))),
    "exp": np.exp,
}
_BINARY_FUNCS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def _finite(v):
    return np.where(np.isfinite(v), v, np.nan)


def compile_expression(expr: Expression | Skeleton) -> Callable:
    """Compile a tree into ``f(X, consts=None) -> y`` over a batch of inputs.

    ``X`` has shape (N, D). ``consts`` optionally overrides the tree's
    constants (or fills a skeleton's placeholders) in prefix order; each entry
    may be a scalar or an array broadcastable against (N,), e.g. shape (m, 1)
    to evaluate m constant vectors at once. Domain failures and non-finite
    intermediates come back as NaN.
    """
    tree = expr.tree if isinstance(expr, Skeleton) else expr
    slot = [0]

    def build(node: Node) -> Callable:
        if isinstance(node, Var):
            i = node.index
            return lambda X, c: X[:, i]
        if isinstance(node, (Const, Placeholder)):
            j = slot[0]
            slot[0] += 1
            default = node.value if isinstance(node, Const) else 1.0
            return lambda X, c: default if c is None else c[j]
        fn_args = [build(a) for a in node.args]
        if len(fn_args) == 2:
            f2 = _BINARY_FUNCS[node.name]
            left, right = fn_args
            return lambda X, c: _finite(f2(left(X, c), right(X, c)))
        f1 = _UNARY_FUNCS[node.name]
        (inner,) = fn_args
        return lambda X, c: _finite(f1(inner(X, c)))

    body = build(tree.root)

    def run(X: np.ndarray, consts=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("X must be 2-D (N, D)")
        with np.errstate(all="ignore"):
            out = body(X, consts)
        return np.broadcast_to(np.asarray(out, dtype=np.float64), np.broadcast_shapes(np.shape(out), (X.shape[0],)))

    run.n_constants = slot[0]
    return run


def evaluate_batch(expr: Expression, X: np.ndarray) -> np.ndarray:
    """Evaluate on every row of ``X``; NaN marks a domain failure."""
    return np.array(compile_expression(expr)(X), dtype=np.float64)


def evaluate(expr: Expression, x: Sequence[float]) -> float | None:
    """Evaluate at one point. Returns ``None`` on a domain failure."""
    x = [float(v) for v in x]
    if len(x) != expr.input_dim:
        raise ValueError(f"expected {expr.input_dim} inputs, got {len(x)}")
    try:
        value = _eval_scalar(expr.root, x)
    except _Domain:
        return None
    return value


class _Domain(Exception):
    pass


def _check(v: float) -> float:
    if not math.isfinite(v):
        raise _Domain
    return v


def _eval_scalar(node: Node, x: list[float]) -> float:
    if isinstance(node, Var):
        return x[node.index]
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Placeholder):
        raise ValueError("cannot evaluate a skeleton without constants")
    vals = [_eval_scalar(a, x) for a in node.args]
    name = node.name
    try:
        if name == "add":
            return _check(vals[0] + vals[1])
        if name == "sub":
            return _check(vals[0] - vals[1])
        if name == "mul":
            return _check(vals[0] * vals[1])
        (v,) = vals
        if name == "inv":
            if v == 0:
                raise _Domain
            return _check(1.0 / v)
        if name == "log":
            if v <= 0:
                raise _Domain
            return _check(math.log(v))
        if name == "sqrt":
            if v < 0:
                raise _Domain
            return _check(math.sqrt(v))
        if name == "exp":
            return _check(math.exp(v))
        if name == "pow2":
            return _check(v * v)
        if name == "pow3":
            return _check(v * v * v)
        if name == "abs":
            return abs(v)
        if name == "sin":
            return _check(math.sin(v))
        if name == "cos":
            return _check(math.cos(v))
        if name == "tan":
            return _check(math.tan(v))
        if name == "arctan":
            return math.atan(v)
    except (OverflowError, ValueError):
        raise _Domain from None
    raise AssertionError(name)


# --------------------------------------------------------------------------- prefix codec


def to_prefix(expr: Expression | Skeleton, framed: bool = False) -> list[str]:
    """Prefix-order token names; constants expand to (sign, mantissa, exponent).

    With ``framed=True`` the stream is wrapped in BOS/EOS as fed to the
    symbolic encoder.
    """
    tree = expr.tree if isinstance(expr, Skeleton) else expr
    out: list[str] = [BOS] if framed else []
    for node in iter_nodes(tree.root):
        if isinstance(node, Op):
            out.append(node.name)
        elif isinstance(node, Var):
            out.append(f"x{node.index}")
        elif isinstance(node, Const):
            out.extend(tokenize_float(node.value).tokens())
        else:
            out.append(f"C{node.index}")
    if framed:
        out.append(EOS)
    return out


def to_text(expr: Expression | Skeleton) -> str:
    return " ".join(to_prefix(expr))


def from_prefix(tokens: Sequence[str] | str, input_dim: int | None = None) -> Expression:
    """Parse a prefix stream back into a tree.

    ``input_dim`` defaults to one more than the largest variable index seen.
    Raises :class:`ParseError` on unknown tokens, arity violations, broken
    constant triplets and trailing tokens.
    """
    if isinstance(tokens, str):
        tokens = tokens.split()
    tokens = list(tokens)
    if tokens and tokens[0] == BOS:
        if tokens[-1] != EOS:
            raise ParseError("BOS without matching EOS")
        tokens = tokens[1:-1]
    pos = 0

    def parse() -> Node:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("truncated expression: missing operand")
        tok = tokens[pos]
        pos += 1
        if tok in ARITY:
            return Op(tok, tuple(parse() for _ in range(ARITY[tok])))
        if tok in SIGNS:
            if pos + 2 > len(tokens):
                raise ParseError("incomplete constant triplet")
            mant, exp = tokens[pos], tokens[pos + 1]
            pos += 2
            if not (mant.isdigit() and len(mant) <= 4 and exp.startswith("E")):
                raise ParseError(f"malformed constant triplet {tok} {mant} {exp}")
            try:
                e = int(exp[1:])
            except ValueError:
                raise ParseError(f"malformed exponent {exp!r}") from None
            if not -100 <= e <= 100:
                raise ParseError(f"exponent {exp} out of range")
            return Const(detokenize_float((tok, int(mant), e)))
        if tok.startswith("x") and tok[1:].isdigit():
            return Var(int(tok[1:]))
        if tok.startswith("C") and tok[1:].isdigit():
            return Placeholder(int(tok[1:]))
        raise ParseError(f"unknown token {tok!r}")

    root = parse()
    if pos != len(tokens):
        raise ParseError(f"{len(tokens) - pos} leftover tokens after a complete tree")
    used = [n.index for n in iter_nodes(root) if isinstance(n, Var)]
    dim = input_dim if input_dim is not None else (max(used) + 1 if used else 1)
    try:
        return Expression(root, dim)
    except ValueError as err:
        raise ParseError(str(err)) from None


# --------------------------------------------------------------------------- skeletons


def skeletonize(expr: Expression) -> Skeleton:
    """Replace constants left to right (prefix order) by C_1..C_k."""
    counter = [0]

    def strip(node: Node) -> Node:
        if isinstance(node, Const):
            counter[0] += 1
            return Placeholder(counter[0])
        if isinstance(node, Op):
            return Op(node.name, tuple(strip(a) for a in node.args))
        return node

    root = strip(expr.root)
    return Skeleton(Expression(root, expr.input_dim), counter[0])


def _fill(node: Node, consts: Sequence[float]) -> Node:
    if isinstance(node, Placeholder):
        return Const(float(consts[node.index - 1]))
    if isinstance(node, Op):
        return Op(node.name, tuple(_fill(a, consts) for a in node.args))
    return node


def with_constants(expr: Expression, values: Sequence[float]) -> Expression:
    """Replace the constants of ``expr`` (prefix order) by ``values``."""
    return skeletonize(expr).fill(values)


def quantize(expr: Expression) -> Expression:
    """Round every constant to the tokenizer's four significant digits."""
    return with_constants(expr, [round_sig(c) for c in constants(expr)])


def unstandardize(expr: Expression, mean: np.ndarray, std: np.ndarray) -> Expression:
    """Rewrite ``f(z)`` with ``z = (x - mean) / std`` as a function of raw ``x``.

    Variables already wrapped as ``add(mul(C_a, x), C_b)`` or ``mul(C_a, x)``
    absorb the change of coordinates into their constants; bare variables get
    an explicit affine wrapper.
    """
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)

    def scale_shift(i: int) -> tuple[float, float]:
        return 1.0 / std[i], -mean[i] / std[i]

    def rewrite(node: Node) -> Node:
        if isinstance(node, Op) and node.name == "add":
            left, right = node.args
            if (
                isinstance(left, Op)
                and left.name == "mul"
                and isinstance(left.args[0], Const)
                and isinstance(left.args[1], Var)
                and isinstance(right, Const)
            ):
                a, b = left.args[0].value, right.value
                s, t = scale_shift(left.args[1].index)
                return Op("add", (Op("mul", (Const(a * s), left.args[1])), Const(a * t + b)))
        if isinstance(node, Op) and node.name == "mul":
            c, v = node.args
            if isinstance(c, Const) and isinstance(v, Var):
                s, t = scale_shift(v.index)
                return Op("add", (Op("mul", (Const(c.value * s), v)), Const(c.value * t)))
        if isinstance(node, Var):
            s, t = scale_shift(node.index)
            return Op("add", (Op("mul", (Const(s), node)), Const(t)))
        if isinstance(node, Op):
            return Op(node.name, tuple(rewrite(a) for a in node.args))
        return node

    return Expression(rewrite(expr.root), expr.input_dim)


def pretty(expr: Expression | Skeleton) -> str:
    """Human-readable infix rendering (for logs and CLI output only)."""
    tree = expr.tree if isinstance(expr, Skeleton) else expr

    def fmt(node: Node) -> str:
        if isinstance(node, Var):
            return f"x{node.index}"
        if isinstance(node, Const):
            return f"{node.value:.4g}"
        if isinstance(node, Placeholder):
            return f"C{node.index}"
        if node.name in _BINARY_FUNCS:
            sym = {"add": "+", "sub": "-", "mul": "*"}[node.name]
            return f"({fmt(node.args[0])} {sym} {fmt(node.args[1])})"
        return f"{node.name}({fmt(node.args[0])})"

    return fmt(tree.root)


__all__ = [
    "ARITY",
    "Const",
    "Expression",
    "Op",
    "ParseError",
    "Placeholder",
    "SamplerConfig",
    "Skeleton",
    "Var",
    "compile_expression",
    "complexity",
    "constants",
    "count_ops",
    "evaluate",
    "evaluate_batch",
    "from_prefix",
    "iter_nodes",
    "pretty",
    "quantize",
    "sample_expression",
    "skeletonize",
    "to_prefix",
    "to_text",
    "unstandardize",
    "variables",
    "with_constants",
]
