"""Dense 2-D tensors with tape-recorded reverse-mode differentiation.

Every value is a float64 matrix. Operations executed inside an active
:class:`Tape` are recorded together with a closure that maps the output
gradient to input gradients; :meth:`Tape.backward` replays them in reverse.
Outside a tape the same functions just compute values, which is what
evaluation passes use.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError", "NumericError", "Tensor", "Tape", "tensor", "active_tape",
    "matmul", "transpose", "add", "sub", "mul", "ewise", "scale", "negate",
    "add_row", "repeat_rows", "softmax_rows", "log_softmax_rows", "reduce",
    "sum_all", "concat_cols", "concat_rows", "slice_cols", "slice_rows",
    "take_rows", "pick", "relu", "tanh", "sigmoid", "activate", "combine",
    "bce_with_logits", "GradCheckReport", "grad_check",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_tape_ids = itertools.count(1)
_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 matrix with a gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 tape_id: int | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id = tape_id
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape_id=None) -> "Tensor":
        # fast path for op outputs: arr is already a fresh float64 2-D array
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.grad = None
        t.requires_grad = tape_id is not None
        t.tape_id = tape_id
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor({self.rows}x{self.cols}{label})"


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class _Op:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations for one forward pass."""

    ops: list[_Op] = field(default_factory=list)
    tape_id: int = field(default_factory=lambda: next(_tape_ids))

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones((1, 1))
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            grads = op.backward(g)
            for inp, gi in zip(op.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad = inp.grad + gi


def _record(name: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(arr)
    out = Tensor._wrap(arr, tape.tape_id)
    tape.ops.append(_Op(name, inputs, out, backward))
    return out


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def ewise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    _same_shape(a, b, f"ewise {kind}")
    if kind == "add":
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "mul":
        ad, bd = a.data, b.data
        return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if kind == "sub":
        return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    raise ValueError(f"unknown ewise kind {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return ewise(a, b, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def negate(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """``a`` plus ``row`` (1 x cols) added to every row; used for biases."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: row {row.shape} does not fit {a.shape}")
    return _record("add_row", a.data + row.data, (a, row),
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def repeat_rows(row: Tensor, n: int) -> Tensor:
    if row.rows != 1:
        raise ShapeError(f"repeat_rows: expected a single row, got {row.shape}")
    return _record("repeat_rows", np.repeat(row.data, n, axis=0), (row,),
                   lambda g: (g.sum(axis=0, keepdims=True),))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax_rows", p, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _record("log_softmax_rows", out, (a,),
                   lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def reduce(a: Tensor, axis: str, kind: str) -> Tensor:
    """Max/mean/sum along ``axis``.

    ``axis="rows"`` collapses the row axis (result 1 x cols), ``"cols"``
    collapses the column axis (result rows x 1). Max routes the gradient
    to the first maximal element of each reduced slice.
    """
    if a.data.size == 0:
        raise ValueError("reduce: empty tensor")
    if axis not in ("rows", "cols"):
        raise ValueError(f"unknown axis {axis!r}")
    ax = 0 if axis == "rows" else 1
    x = a.data
    if kind == "max":
        idx = x.argmax(axis=ax)  # argmax returns the first maximum
        out = x.max(axis=ax, keepdims=True)

        def backward(g):
            ga = np.zeros_like(x)
            if ax == 0:
                ga[idx, np.arange(x.shape[1])] = g[0]
            else:
                ga[np.arange(x.shape[0]), idx] = g[:, 0]
            return (ga,)

        return _record("reduce_max", out, (a,), backward)
    if kind == "mean":
        n = x.shape[ax]
        return _record("reduce_mean", x.mean(axis=ax, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g / n, x.shape),))
    if kind == "sum":
        return _record("reduce_sum", x.sum(axis=ax, keepdims=True), (a,),
                       lambda g: (np.broadcast_to(g, x.shape),))
    raise ValueError(f"unknown reduce kind {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum_all", np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_cols: no parts")
    m = parts[0].rows
    for p in parts:
        if p.rows != m:
            raise ShapeError(f"concat_cols: row counts differ, {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.cols for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return _record("concat_cols", out, parts,
                   lambda g: [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))])


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows: no parts")
    n = parts[0].cols
    for p in parts:
        if p.cols != n:
            raise ShapeError(f"concat_rows: column counts differ, {parts[0].shape} vs {p.shape}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.rows for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)
    return _record("concat_rows", out, parts,
                   lambda g: [g[bounds[i]:bounds[i + 1]] for i in range(len(parts))])


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[:, start:stop] = g
        return (ga,)

    return _record("slice_cols", a.data[:, start:stop].copy(), (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[start:stop] = g
        return (ga,)

    return _record("slice_rows", a.data[start:stop].copy(), (a,), backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` at ``ids`` (repeats allowed)."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size == 0:
        raise ShapeError("take_rows: no ids")
    if ids.min() < 0 or ids.max() >= table.rows:
        raise IndexError(f"take_rows: id out of range for table with {table.rows} rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("take_rows", table.data[ids], (table,), backward)


def pick(a: Tensor, row: int, col: int) -> Tensor:
    shape = a.shape

    def backward(g):
        ga = np.zeros(shape)
        ga[row, col] = g[0, 0]
        return (ga,)

    return _record("pick", np.array([[a.data[row, col]]]), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def activate(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "identity":
        return a
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def combine(parts: Sequence[Tensor], kind: str) -> Tensor:
    """Element-wise max or mean across same-shape tensors.

    Max ties go to the lowest-index part.
    """
    parts = tuple(parts)
    if not parts:
        raise ShapeError("combine: no parts")
    for p in parts[1:]:
        _same_shape(parts[0], p, "combine")
    if len(parts) == 1:
        return parts[0]
    stack = np.stack([p.data for p in parts])
    if kind == "max":
        idx = stack.argmax(axis=0)
        out = np.take_along_axis(stack, idx[None], axis=0)[0]
        return _record("combine_max", out, parts,
                       lambda g: [np.where(idx == k, g, 0.0) for k in range(len(parts))])
    if kind == "mean":
        # first + mean offset: equal parts come back bit-exact
        n = len(parts)
        out = stack[0] + (stack[1:] - stack[0]).sum(axis=0) / n
        return _record("combine_mean", out, parts, lambda g: [g / n] * n)
    raise ValueError(f"unknown combiner {kind!r}")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    # log(1 + exp(z)) - y z, evaluated without overflow
    loss = (np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size
    return _record("bce_with_logits", np.array([[loss]]), (logits,),
                   lambda g: ((_sigmoid(z) - y) * (g[0, 0] / n),))


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_input: list[float]
    worst: tuple[int, int, int] | None  # (input index, row, col)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-5, floor: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of an element is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps vanishing gradients from dividing round-off by ~0.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    leaves = [Tensor(t.data, requires_grad=True, name=t.name) for t in inputs]
    with Tape() as tape:
        out = f(*leaves)
    if out.shape != (1, 1):
        raise ShapeError(f"grad_check: f must return a 1x1 tensor, got {out.shape}")
    tape.backward(out)

    def value(args) -> float:
        v = f(*args).item()
        return v

    per_input, worst, max_err = [], None, 0.0
    base = [t.data for t in leaves]
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        if not np.all(np.isfinite(analytic)):
            bad = np.argwhere(~np.isfinite(analytic))[0]
            raise NumericError(f"non-finite analytic gradient at input {k}, element {tuple(bad)}")
        err_k = 0.0
        for idx in np.ndindex(*leaf.shape):
            plus, minus = base[k].copy(), base[k].copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = [Tensor(b) for b in base]
            args_m = [Tensor(b) for b in base]
            args_p[k] = Tensor(plus)
            args_m[k] = Tensor(minus)
            fp, fm = value(args_p), value(args_m)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value at input {k}, element {idx}")
            numeric = (fp - fm) / (2 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > err_k:
                err_k = err
            if err > max_err:
                max_err, worst = err, (k, *idx)
        per_input.append(err_k)
    return GradCheckReport(max_err, tol, per_input, worst)
