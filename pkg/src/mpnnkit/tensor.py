"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Only the operations the graph models in this package actually need are
implemented: 2-D matrix products, a small set of pointwise functions,
reductions, softmax, concatenation/slicing, row gather/scatter, and a GRU
cell composed from the primitives. Broadcasting is restricted to exact-shape
and scalar operands so every backward rule stays auditable at a glance.

Every forward result is checked for NaN/Inf; divergence surfaces as a
:class:`NumericError` at the op that produced it.
"""

from __future__ import annotations

import contextlib
import json
import os
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "GruParams",
    "DimensionError",
    "ContractError",
    "NumericError",
    "no_grad",
    "backward",
    "active_tape",
    "matmul",
    "batched_matvec",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "reduce_sum",
    "softmax",
    "concat",
    "reshape",
    "gather_rows",
    "scatter_sum_rows",
    "slice_cols",
    "repeat_rows",
    "gru_cell",
    "MultiplyCounter",
    "count_multiplies",
    "save_params",
    "load_params",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf (divergence)."""


class Tape:
    """Ordered record of taped operations for one reverse pass.

    Entries are appended in execution order, so the list is topologically
    sorted by construction: every op's inputs were created before the op
    itself. ``backward`` walks the list once in reverse and then clears it.
    """

    def __init__(self) -> None:
        self.entries: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []

    def record(self, out: "Tensor", rule: Callable[[np.ndarray], None]) -> None:
        self.entries.append((out, rule))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MultiplyCounter:
    """Accumulates the number of scalar multiplications performed by taped ops."""

    total: int = 0


# Tapes are confined to one worker; thread-local state keeps that true even
# if callers use threads instead of processes.
_local = threading.local()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
        _local.mul_counter = None
    return _local


def active_tape() -> Tape:
    return _ctx().tape


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (forward values only)."""
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextlib.contextmanager
def count_multiplies(counter: MultiplyCounter):
    """Route multiply counts of ops executed inside the block to ``counter``."""
    ctx = _ctx()
    prev = ctx.mul_counter
    ctx.mul_counter = counter
    try:
        yield counter
    finally:
        ctx.mul_counter = prev


def _count_muls(n: int) -> None:
    c = _ctx().mul_counter
    if c is not None:
        c.total += int(n)


class Tensor:
    """Dense float64 array, row-major, with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are constants.
    def __add__(self, other):
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"cannot operate on {type(x).__name__}")


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap a forward result, check finiteness, and tape it when needed."""
    data = np.asarray(data, dtype=np.float64, order="C")
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a forward op")
    ctx = _ctx()
    rg = ctx.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = rg
    out.grad = np.zeros_like(data) if rg else None
    if rg:
        ctx.tape.record(out, rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on.

    Walks the active tape once in reverse and clears it afterwards.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tracked tensor")
    loss.grad[...] = 1.0
    tape = _ctx().tape
    for out, rule in reversed(tape.entries):
        rule(out.grad)
    tape.clear()


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; dY flows as dA = g @ B^T, dB = A^T @ g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul operands must be 2-D")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    m, k = a.data.shape
    n = b.data.shape[1]
    _count_muls(m * k * n)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(a.data @ b.data, (a, b), rule)


def batched_matvec(mats: Tensor, vecs: Tensor) -> Tensor:
    """Row-wise matrix-vector products.

    ``mats`` holds one row-major (p x q) matrix per row, flattened to
    (m, p*q); ``vecs`` is (m, q). Returns (m, p) with row i equal to
    ``mats[i] @ vecs[i]``.
    """
    if mats.data.ndim != 2 or vecs.data.ndim != 2:
        raise DimensionError("batched_matvec operands must be 2-D")
    m, q = vecs.data.shape
    if mats.data.shape[0] != m or mats.data.shape[1] % q != 0:
        raise DimensionError(
            f"matrix rows of width {mats.data.shape[1]} do not factor over q={q}"
        )
    p = mats.data.shape[1] // q
    m3 = mats.data.reshape(m, p, q)
    _count_muls(m * p * q)

    def rule(g: np.ndarray) -> None:
        if mats.requires_grad:
            mats.grad += np.einsum("ip,iq->ipq", g, vecs.data).reshape(m, p * q)
        if vecs.requires_grad:
            vecs.grad += np.einsum("ipq,ip->iq", m3, g)

    return _result(np.einsum("ipq,iq->ip", m3, vecs.data), (mats, vecs), rule)


def _binary_shapes(a: Tensor, b: Tensor) -> tuple[bool, bool]:
    """Classify an elementwise pair: exact-shape, or one scalar operand."""
    if a.data.shape == b.data.shape:
        return False, False
    if b.data.size == 1:
        return False, True
    if a.data.size == 1:
        return True, False
    raise DimensionError(
        f"elementwise op needs matching shapes or a scalar operand: "
        f"{a.data.shape} vs {b.data.shape}"
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    a_scalar, b_scalar = _binary_shapes(a, b)
    av = a.data.reshape(()) if a_scalar else a.data
    bv = b.data.reshape(()) if b_scalar else b.data

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g.sum().reshape(a.data.shape) if a_scalar else g
        if b.requires_grad:
            b.grad += g.sum().reshape(b.data.shape) if b_scalar else g

    return _result(av + bv, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a_scalar, b_scalar = _binary_shapes(a, b)
    av = a.data.reshape(()) if a_scalar else a.data
    bv = b.data.reshape(()) if b_scalar else b.data

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g.sum().reshape(a.data.shape) if a_scalar else g
        if b.requires_grad:
            b.grad -= g.sum().reshape(b.data.shape) if b_scalar else g

    return _result(av - bv, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_scalar, b_scalar = _binary_shapes(a, b)
    av = a.data.reshape(()) if a_scalar else a.data
    bv = b.data.reshape(()) if b_scalar else b.data
    out = av * bv
    _count_muls(out.size)

    def rule(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g * bv
            a.grad += ga.sum().reshape(a.data.shape) if a_scalar else ga
        if b.requires_grad:
            gb = g * av
            b.grad += gb.sum().reshape(b.data.shape) if b_scalar else gb

    return _result(out, (a, b), rule)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * (y * (1.0 - y))

    return _result(y, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * (1.0 - y * y)

    return _result(y, (x,), rule)


def relu(x: Tensor) -> Tensor:
    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * (x.data > 0)

    return _result(np.maximum(x.data, 0.0), (x,), rule)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.data.shape}")
    return axis % x.data.ndim


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over one axis (or all elements); backward broadcasts the gradient."""
    if axis is None:
        def rule(g: np.ndarray) -> None:
            if x.requires_grad:
                x.grad += g.reshape(())

        return _result(x.data.sum(), (x,), rule)

    ax = _check_axis(x, axis)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += np.expand_dims(g, ax)

    return _result(x.data.sum(axis=ax), (x,), rule)


def softmax(x: Tensor, axis: int) -> Tensor:
    ax = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            s = (g * y).sum(axis=ax, keepdims=True)
            x.grad += y * (g - s)

    return _result(y, (x,), rule)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty sequence")
    ax = _check_axis(xs[0], axis)
    base = list(xs[0].data.shape)
    for t in xs[1:]:
        other = list(t.data.shape)
        if len(other) != len(base):
            raise DimensionError("concat inputs must share rank")
        if other[:ax] != base[:ax] or other[ax + 1:] != base[ax + 1:]:
            raise DimensionError("concat inputs disagree off the concat axis")
    sizes = [t.data.shape[ax] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def rule(g: np.ndarray) -> None:
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), rule)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise DimensionError(f"cannot reshape {x.data.shape} to {shape}")

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.reshape(x.data.shape)

    return _result(x.data.reshape(shape), (x,), rule)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of a 2-D tensor by integer index (repeats allowed)."""
    if x.data.ndim != 2:
        raise DimensionError("gather_rows needs a 2-D tensor")
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ContractError("gather_rows index out of range")

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _result(x.data[idx], (x,), rule)


def scatter_sum_rows(x: Tensor, index, num_rows: int) -> Tensor:
    """Sum rows of ``x`` into ``num_rows`` output rows grouped by ``index``."""
    if x.data.ndim != 2:
        raise DimensionError("scatter_sum_rows needs a 2-D tensor")
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != (x.data.shape[0],):
        raise DimensionError("scatter index length must match rows")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ContractError("scatter_sum_rows index out of range")
    out = np.zeros((int(num_rows), x.data.shape[1]))
    np.add.at(out, idx, x.data)

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g[idx]

    return _result(out, (x,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("slice_cols needs a 2-D tensor")
    if not 0 <= start < stop <= x.data.shape[1]:
        raise DimensionError(f"column slice [{start}:{stop}] invalid for {x.data.shape}")

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad[:, start:stop] += g

    return _result(x.data[:, start:stop].copy(), (x,), rule)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a (d,) or (1, d) tensor into n identical rows; backward sums rows."""
    if x.data.ndim == 1:
        row = x.data.reshape(1, -1)
    elif x.data.ndim == 2 and x.data.shape[0] == 1:
        row = x.data
    else:
        raise DimensionError("repeat_rows needs a single-row tensor")

    def rule(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g.sum(axis=0).reshape(x.data.shape)

    return _result(np.broadcast_to(row, (int(n), row.shape[1])).copy(), (x,), rule)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------


@dataclass
class GruParams:
    """Weights of one gated recurrent cell; the update uses no bias terms.

    Input-to-hidden matrices are stored (d_in, d) and hidden-to-hidden
    matrices (d, d) so states multiply on the left as row vectors.
    """

    wz: Tensor
    uz: Tensor
    wr: Tensor
    ur: Tensor
    wh: Tensor
    uh: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"wz": self.wz, "uz": self.uz, "wr": self.wr,
                "ur": self.ur, "wh": self.wh, "uh": self.uh}


def gru_cell(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """Gated recurrent update:

        z = sigmoid(x Wz + h Uz)
        r = sigmoid(x Wr + h Ur)
        hbar = tanh(x Wh + (r * h) Uh)
        h' = (1 - z) * h + z * hbar

    Accepts single states (1-D) or row-stacked states (2-D); the result has
    the rank of ``h``.
    """
    d_in, d = params.wz.data.shape
    for name, t in params.tensors().items():
        expect = (d_in, d) if name.startswith("w") else (d, d)
        if t.data.shape != expect:
            raise DimensionError(f"GRU weight {name} has shape {t.data.shape}, expected {expect}")
    vector_in = h.data.ndim == 1
    x2 = reshape(x, (1, x.data.size)) if x.data.ndim == 1 else x
    h2 = reshape(h, (1, h.data.size)) if vector_in else h
    if x2.data.shape[1] != d_in or h2.data.shape[1] != d:
        raise DimensionError(
            f"GRU inputs ({x2.data.shape[1]}, {h2.data.shape[1]}) do not match weights ({d_in}, {d})"
        )
    z = sigmoid(add(matmul(x2, params.wz), matmul(h2, params.uz)))
    r = sigmoid(add(matmul(x2, params.wr), matmul(h2, params.ur)))
    hbar = tanh(add(matmul(x2, params.wh), matmul(mul(r, h2), params.uh)))
    out = add(mul(sub(_coerce(1.0), z), h2), mul(z, hbar))
    return reshape(out, (d,)) if vector_in else out


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------


def save_params(params: Mapping[str, Tensor], path: str) -> None:
    """Write a flat name -> {shape, values} JSON checkpoint (bit-exact floats).

    Values are row-major float64 rendered with Python's shortest round-trip
    repr, so load(save(p)) reproduces every bit. The write is atomic.
    """
    obj = {
        name: {"shape": list(t.data.shape), "values": t.data.ravel().tolist()}
        for name, t in params.items()
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(obj, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def load_params(path: str) -> dict[str, Tensor]:
    with open(path) as f:
        obj = json.load(f)
    out: dict[str, Tensor] = {}
    for name, entry in obj.items():
        shape = tuple(int(s) for s in entry["shape"])
        arr = np.array(entry["values"], dtype=np.float64).reshape(shape)
        out[name] = Tensor(arr, requires_grad=True)
    return out
