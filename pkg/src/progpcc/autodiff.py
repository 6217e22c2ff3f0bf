"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tape records operations in execution order; backward() walks them in
reverse, accumulating adjoints per intermediate. Everything computes in
float64. Ops run equally well with no tape attached, in which case they are
plain numpy calls (inference mode).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np
from scipy.special import expit


class Param:
    """A named trainable array."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data: np.ndarray) -> None:
        self.name = name
        self.data = np.asarray(data, dtype=np.float64)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.data.shape})"


class Var:
    """A value flowing through the graph. track=True means gradients reach it."""

    __slots__ = ("data", "tape", "track")

    def __init__(self, data, tape: Optional["Tape"] = None, track: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.track = bool(track) and tape is not None

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Operation record for one forward pass."""

    def __init__(self) -> None:
        self.records: list[tuple[Var, list[Var], Callable]] = []
        self._leaves: dict[int, Var] = {}

    def leaf(self, param: Param) -> Var:
        """The (cached) graph entry point for a parameter."""
        v = self._leaves.get(id(param))
        if v is None:
            v = Var(param.data, self, track=True)
            self._leaves[id(param)] = v
        return v

    def record(self, out: Var, ins: list[Var], backward_fn: Callable) -> None:
        self.records.append((out, ins, backward_fn))


def backward(tape: Tape, loss: Var, params: Iterable[Param],
             free_tape: bool = True) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every listed parameter.

    Parameters the loss never touched get exact zeros.  By default the tape
    is cleared afterwards: records form Var <-> Tape reference cycles whose
    closures pin large intermediate arrays, and waiting for the cyclic
    collector would let peak memory grow by gigabytes across training steps.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for out, ins, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for v, gv in zip(ins, fn(g)):
            if gv is None or not v.track:
                continue
            acc = grads.get(id(v))
            grads[id(v)] = gv if acc is None else acc + gv
    result = {}
    for p in params:
        leaf = tape._leaves.get(id(p))
        g = grads.get(id(leaf)) if leaf is not None else None
        result[p.name] = np.zeros_like(p.data) if g is None else np.asarray(g)
    if free_tape:
        tape.records.clear()
        tape._leaves.clear()
    return result


# --- op helpers ----------------------------------------------------------------


def constant(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _ctx(*vars_: Var):
    tape = None
    track = False
    for v in vars_:
        if isinstance(v, Var) and v.tape is not None:
            tape = v.tape
        if isinstance(v, Var) and v.track:
            track = True
    return tape, track


def _emit(data, ins: list[Var], fn: Callable) -> Var:
    tape, track = _ctx(*ins)
    out = Var(data, tape if track else None, track=track)
    if track:
        tape.record(out, ins, fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise and linear ops -------------------------------------------------


def add(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _emit(a.data + b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _emit(a.data - b.data, [a, b],
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _emit(a.data * b.data, [a, b],
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b) -> Var:
    a, b = constant(a), constant(b)
    return _emit(a.data @ b.data, [a, b],
                 lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a, b) -> Var:
    """Batched matmul over a leading channel axis: (C,i,j) @ (C,j,n) -> (C,i,n)."""
    a, b = constant(a), constant(b)
    return _emit(np.einsum("cij,cjn->cin", a.data, b.data), [a, b],
                 lambda g: (np.einsum("cin,cjn->cij", g, b.data),
                            np.einsum("cij,cin->cjn", a.data, g)))


def reshape(x, shape) -> Var:
    x = constant(x)
    return _emit(x.data.reshape(shape), [x], lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes) -> Var:
    x = constant(x)
    inv = np.argsort(axes)
    return _emit(x.data.transpose(axes), [x], lambda g: (g.transpose(inv),))


def relu(x) -> Var:
    x = constant(x)
    mask = x.data > 0
    # np.maximum (unlike a mask-select) propagates NaN, so numerical blow-ups
    # surface in the loss instead of being silently zeroed
    return _emit(np.maximum(x.data, 0.0), [x], lambda g: (g * mask,))


def sigmoid(x) -> Var:
    x = constant(x)
    y = expit(x.data)
    return _emit(y, [x], lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Var:
    x = constant(x)
    y = np.tanh(x.data)
    return _emit(y, [x], lambda g: (g * (1.0 - y * y),))


def softplus(x) -> Var:
    x = constant(x)
    return _emit(np.logaddexp(0.0, x.data), [x], lambda g: (g * expit(x.data),))


def log(x) -> Var:
    x = constant(x)
    return _emit(np.log(x.data), [x], lambda g: (g / x.data,))


def clamp_min(x, floor: float) -> Var:
    """max(x, floor); gradient passes only where x > floor."""
    x = constant(x)
    mask = x.data > floor
    return _emit(np.where(mask, x.data, floor), [x], lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Var:
    x = constant(x)
    mask = (x.data > lo) & (x.data < hi)
    return _emit(np.clip(x.data, lo, hi), [x], lambda g: (g * mask,))


def vsum(x) -> Var:
    x = constant(x)
    return _emit(x.data.sum(), [x], lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def vmean(x) -> Var:
    x = constant(x)
    n = x.data.size
    return _emit(x.data.mean(), [x],
                 lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))


def concat_cols(parts: list) -> Var:
    parts = [constant(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=1), parts, back)


def slice_cols(x, start: int, stop: int) -> Var:
    x = constant(x)

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _emit(x.data[:, start:stop], [x], back)


def take_rows(x, idx: np.ndarray) -> Var:
    """Gather rows; scatter-add on the way back."""
    x = constant(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], [x], back)
