"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor` values.  When a tape is
active (``with Tape() as tape:``) and any input requires a gradient, the op
appends a record holding its inputs, output and a backward rule.  Tensors are
never mutated after creation, so records can hold references safely.

Batched inputs follow numpy's matmul convention: leading dimensions are batch
dimensions and the op acts on the trailing one or two axes.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    captured: dict[str, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)

    def capture(self, name: str, t: Tensor) -> Tensor:
        """Register an intermediate node whose gradient ``backward`` must report."""
        self.captured[name] = t
        return t


def _current() -> Tape | None:
    return _active[-1] if _active else None


def _out(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not isinstance(data, np.ndarray):
        data = np.array(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    tape = _current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    data.flags.writeable = False
    out.data = data
    out.requires_grad = needs
    out.id = next(_ids)
    out.name = None
    if needs:
        tape.records.append(Record(inputs, out, backward, op))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------

def _check_bias_shapes(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias_shapes(a, b, "add")
    return _out(a.data + b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias_shapes(a, b, "sub")
    return _out(a.data - b.data, (a, b),
                lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_bias_shapes(a, b, "mul")
    return _out(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _out(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _out(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _out(y, (a,), back, "gelu")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar."""
    return _out(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _out(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


# --- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape[:-2]} vs {b.shape[:-2]}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, _unbroadcast(gb, b.shape)

    return _out(a.data @ b.data, (a, b), back, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _out(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return _out(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _out(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def take(a: Tensor, index, axis: int) -> Tensor:
    """Select entries ``index`` along ``axis`` (rows of a hidden state, say)."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, (slice(None),) * (axis % a.data.ndim) + (index,), g)
        return (out,)

    return _out(np.take(a.data, index, axis=axis), (a,), back, "take")


def take_rows(a: Tensor, rows) -> Tensor:
    """Pick one row per batch element: ``a[b, rows[b]]`` for ``a`` of shape (B, T, d)."""
    rows = np.asarray(rows, dtype=np.int64)
    bidx = np.arange(a.shape[0])

    def back(g):
        out = np.zeros(a.shape)
        out[bidx, rows] = g
        return (out,)

    return _out(a.data[bidx, rows], (a,), back, "take_rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id outside [0, {table.shape[0]})")

    def back(g):
        out = np.zeros(table.shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _out(table.data[ids], (table,), back, "embedding")


# --- normalisation ------------------------------------------------------

def causal_mask(q: int, k: int | None = None) -> np.ndarray:
    """Boolean mask, True where key ``j`` is admissible for query ``i`` (j <= i + k - q)."""
    k = q if k is None else k
    return np.tri(q, k, k - q, dtype=bool)


def masked_row_softmax(scores: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero."""
    x = scores.data
    if mask is None:
        mask = np.ones(x.shape[-2:], dtype=bool)
    if mask.shape != x.shape[-mask.ndim:]:
        raise ShapeError(f"mask {mask.shape} does not match scores {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("softmax row with no admissible position")
    z = np.where(mask, x, -np.inf)
    z -= z.max(axis=-1, keepdims=True)
    y = np.exp(z, out=z)
    y /= y.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _out(y, (scores,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    a = x.data
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def back(g):
        gx = g * gain.data
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return _out(y, (x, gain, bias), back, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits`` (B, V)."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape} vs targets {targets.shape}")
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = float((lse - z[rows, targets]).mean())

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / z.shape[0]),)

    return _out(np.array(loss), (logits,), back, "cross_entropy")


# --- differentiation ----------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by tensor id.

    The map holds every node that lies on a path to ``loss`` (leaves and
    intermediates alike); ``tape.captured`` names let callers look up the
    nodes they registered.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.id)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = np.asarray(gi, dtype=np.float64)
    for name, t in tape.captured.items():
        grads.setdefault(t.id, np.zeros(t.shape))
    return grads


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5,
               weights: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a tensor; a non-scalar output is contracted with
    fixed ``weights`` so every output coordinate matters.  The default
    weights are random signs times magnitudes in [0.5, 1.5].
    """
    x0 = np.array(point, dtype=np.float64)
    probe = f(Tensor(x0))
    if weights is None:
        rng = np.random.default_rng(0)
        weights = rng.choice([-1.0, 1.0], size=probe.shape) * rng.uniform(0.5, 1.5, size=probe.shape)

    def scalar(x: np.ndarray) -> float:
        y = f(Tensor(x)).data
        v = float((y * weights).sum())
        if not math.isfinite(v):
            raise NumericError("non-finite evaluation in grad_check")
        return v

    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        y = f(x)
        loss = total(mul(y, Tensor(weights)))
    analytic = backward(tape, loss).get(x.id, np.zeros(x0.shape))

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy(); xp[i] += eps
        xm = flat.copy(); xm[i] -= eps
        numeric.reshape(-1)[i] = (scalar(xp.reshape(x0.shape)) - scalar(xm.reshape(x0.shape))) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    # coordinates where both sides vanish carry no signal
    err[(np.abs(analytic) < 1e-12) & (np.abs(numeric) < 1e-9)] = 0.0
    return float(err.max()) if err.size else 0.0
