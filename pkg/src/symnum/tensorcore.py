"""Small reverse-mode autodiff on top of numpy, plus Adam and checkpoints.

Every primitive returns a :class:`Tensor` that remembers its parents and a
backward rule mapping the output gradient to one gradient per parent.
Storage defaults to float32; reductions accumulate in float64. Use
``with default_dtype(np.float64):`` to build float64 parameters (gradient
checks do this).
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]
_GRAD = [True]


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def default_dtype(dtype):
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (inference mode)."""
    _GRAD.append(False)
    try:
        yield
    finally:
        _GRAD.pop()


def grad_enabled() -> bool:
    return _GRAD[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE[-1])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar():
    raise ShapeError("item() needs a single-element tensor")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Wrap ``data`` as a tensor of the current default dtype."""
    return Tensor(np.array(data, dtype=_DTYPE[-1]), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE[-1]), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE[-1]))


def record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Create an op output. ``backward_fn(g)`` returns one gradient (or None)
    per parent. Public so callers can define custom primitives."""
    out = Tensor(data)
    if _GRAD[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# --------------------------------------------------------------------------- engine


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.shape:
                raise ShapeError(f"gradient shape {pg.shape} != parameter shape {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# --------------------------------------------------------------------------- primitives


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _sum_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not _is_bias(a, b):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")
    bias = a.shape != b.shape

    def bw(g):
        return g, (_sum_to_bias(g) if bias else g)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a single-element tensor (e.g. a learnable temperature)."""
    if s.data.size != 1:
        raise ShapeError("scale_by needs a single-element scale")
    sv = s.data.reshape(())

    def bw(g):
        return g * sv, np.array(np.sum(g * a.data, dtype=np.float64)).reshape(s.shape)

    return record(a.data * sv, (a, s), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with identical leading (batch) dims, or a 2-D right operand."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.sum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is an additive constant (0 for
    kept entries, a large negative number for masked ones) broadcastable to
    ``a``."""
    z = a.data if mask is None else a.data + mask.astype(a.dtype)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True, dtype=np.float64)).astype(a.dtype)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(a.dtype)),)

    return record(y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional affine ``gamma * xhat + beta``."""
    d = x.shape[-1]
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        g64 = g.astype(np.float64)
        gh = g64 * gamma.data if gamma is not None else g64
        gx = inv / d * (d * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g64 * xhat).reshape(-1, d).sum(0))
        if beta is not None:
            grads.append(g64.reshape(-1, d).sum(0))
        return grads

    return record(out.astype(x.dtype), parents, bw)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    ad = a.data.astype(np.float64)
    norm = np.sqrt((ad * ad).sum(-1, keepdims=True) + eps)
    y = ad / norm

    def bw(g):
        g64 = g.astype(np.float64)
        return ((g64 - y * (g64 * y).sum(-1, keepdims=True)) / norm,)

    return record(y.astype(a.dtype), (a,), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id outside [0, {table.shape[0]})")

    def bw(g):
        flat = ids.reshape(-1)
        gt = np.zeros(table.shape, dtype=g.dtype)
        if flat.size:
            # sorted segment sums; much faster than np.add.at on big tables
            order = np.argsort(flat, kind="stable")
            keys = flat[order]
            starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
            gt[keys[starts]] = np.add.reduceat(g.reshape(flat.size, -1)[order], starts, axis=0)
        return (gt,)

    return record(table.data[ids], (table,), bw)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; the gradient scatters back (repeats add)."""
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return record(a.data[rows], (a,), bw)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted sum of per-row negative log-likelihoods.

    ``logits`` is (n, V), ``targets`` (n,) integer classes. Without
    ``weights`` this is the mean over rows. Rows with weight 0 are ignored.
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_with_logits expects (n, V) logits")
    n = logits.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    # stays in the logits dtype: the (n, V) block is the largest array in SR training
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1, dtype=np.float64)
    nll = np.log(total) - z[np.arange(n), targets]
    loss = np.array(np.dot(w, nll))

    def bw(g):
        p = e / total[:, None].astype(e.dtype)
        p[np.arange(n), targets] -= 1.0
        p *= (w * float(g))[:, None].astype(p.dtype)
        return (p,)

    return record(loss.astype(logits.dtype), (logits,), bw)


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. A ``None`` gradient counts as
    zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr if lr is None else lr)


# --------------------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    n_checked: int

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check {verdict}: max relative error {self.max_rel_error:.3e} over {self.n_checked} entries"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    h: float = 1e-6,
    atol: float = 1e-7,
    max_checks: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward gradients of ``fn(*inputs)`` with central differences.

    Inputs are promoted to float64 for the duration of the check. The error
    for each entry is ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``.
    ``max_checks`` limits the number of entries probed per input (chosen at
    random), which keeps checks on whole networks cheap.
    """
    originals = [t.data for t in inputs]
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = (0.0, 0, ())
    checked = 0
    try:
        loss = fn(*inputs)
        for t in inputs:
            t.grad = None
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.astype(np.float64) for t in inputs]
        for n, t in enumerate(inputs):
            flat = np.arange(t.data.size)
            if max_checks is not None and flat.size > max_checks:
                flat = rng.choice(flat, max_checks, replace=False)
            for f in flat:
                idx = np.unravel_index(f, t.shape)
                old = t.data[idx]
                step = h * max(1.0, abs(old))
                t.data[idx] = old + step
                with no_grad():
                    up = float(fn(*inputs).data)
                t.data[idx] = old - step
                with no_grad():
                    down = float(fn(*inputs).data)
                t.data[idx] = old
                numeric = (up - down) / (2 * step)
                a = analytic[n][idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
                checked += 1
                if err > worst[0]:
                    worst = (err, n, tuple(int(i) for i in idx))
    finally:
        for t, d in zip(inputs, originals):
            t.data = d
            t.grad = None
    return GradCheckReport(worst[0] < tol, worst[0], worst[1], worst[2], checked)


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"SNCK"


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    """Write ``[magic][u64 header length][JSON header][float32 LE blobs]``.

    The header lists names and shapes in blob order and echoes ``config``.
    """
    names = list(arrays)
    header = {
        "format": 1,
        "dtype": "float32",
        "tensors": [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names],
        "config": config or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, header.get("config", {})
