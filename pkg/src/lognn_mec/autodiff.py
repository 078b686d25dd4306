"""Small define-by-run reverse-mode autodiff engine on float64 numpy arrays.

A :class:`Tape` records every operation whose inputs live on it. Calling
:func:`backward` walks the recorded nodes in reverse append order and
accumulates vector-Jacobian products into the leaves created with
:meth:`Tape.variable`.

Example::

    tape = Tape()
    w = tape.variable(np.ones((3, 1)))
    loss = ad.sum(ad.matmul(ad.constant(x), w))
    grads = backward(tape, loss)   # {w: x.sum(0)[:, None]}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgumentError, NumericError

LRELU_SLOPE = 0.01


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tape:
    """Append-only record of operations; rebuilt for every forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.variables: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, name: str | None = None) -> "Tensor":
        """Register a differentiable leaf (a parameter) on this tape."""
        data = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"variable {name or ''} holds non-finite values")
        self.nodes.append(_Node("leaf", (), None))
        leaf = Tensor(data, self, len(self.nodes) - 1, name)
        self.variables.append(leaf)
        return leaf

    def _record(self, op, inputs, vjp) -> int:
        self.nodes.append(_Node(op, inputs, vjp))
        return len(self.nodes) - 1


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, index): return getitem(self, index)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise InvalidArgumentError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _finish(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    node = tape._record(op, tuple(t.node if t.tape is tape else None for t in inputs), vjp)
    return Tensor(out, tape, node)


def _req(t: Tensor) -> bool:
    return t.tape is not None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidArgumentError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    ra, rb = _req(a), _req(b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if ra else None, _unbroadcast(g, sb) if rb else None))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    ra, rb = _req(a), _req(b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa) if ra else None, -_unbroadcast(g, sb) if rb else None))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    x, y = a.data, b.data
    ra, rb = _req(a), _req(b)
    return _finish("mul", x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape) if ra else None,
                                                    _unbroadcast(g * x, y.shape) if rb else None))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    x, y = a.data, b.data
    if np.any(y == 0):
        raise NumericError("div by zero")
    out = x / y

    ra, rb = _req(a), _req(b)

    def vjp(g):
        gy = g / y
        return (_unbroadcast(gy, x.shape) if ra else None, _unbroadcast(-gy * out, y.shape) if rb else None)

    return _finish("div", out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    ra, rb = _req(a), _req(b)
    return _finish("matmul", x @ y, (a, b), lambda g: (g @ y.T if ra else None, x.T @ g if rb else None))


# --- elementwise nonlinearities ----------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _finish("log", np.log(x), (a,), lambda g: (g / x,))


def log2(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log2 of non-positive value")
    return _finish("log2", np.log2(x), (a,), lambda g: (g / (x * np.log(2.0)),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope: float = LRELU_SLOPE) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _finish("leaky_relu", x * scale, (a,), lambda g: (g * scale,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _finish("clamp_min", np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


# --- reductions and shape ops -------------------------------------------------

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _finish("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _finish("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _finish("getitem", np.array(a.data[index], dtype=np.float64), (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise InvalidArgumentError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _finish("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# --- softmax ------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _finish("softmax", out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def row_softmax(a) -> Tensor:
    return softmax(a, axis=-1)


def col_softmax(a) -> Tensor:
    return softmax(a, axis=-2)


# --- gather / segment ops -------------------------------------------------------

class Segments:
    """Group labels ``ids`` (one per row) into ``n`` segments.

    The sparse indicator matrix makes both segment reductions and the
    adjoint of gathering a single sparse matmul.
    """

    def __init__(self, ids, n: int | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.n = int(self.ids.max()) + 1 if n is None else int(n)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.n):
            raise InvalidArgumentError("segment id out of range")
        self._matrix = None
        self._counts = None

    @property
    def matrix(self) -> sp.csr_matrix:
        if self._matrix is None:
            m = self.ids.size
            self._matrix = sp.csr_matrix((np.ones(m), (self.ids, np.arange(m))), shape=(self.n, m))
        return self._matrix

    @property
    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.ids, minlength=self.n).astype(np.float64)
        return self._counts

    def reduce(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ x)

    def __len__(self) -> int:
        return self.ids.size


def row_gather(a, seg: Segments) -> Tensor:
    """Rows ``a[seg.ids]``; the adjoint scatters back by segment sum."""
    a = _as_tensor(a)
    if a.shape[0] != seg.n:
        raise InvalidArgumentError(f"row_gather: {a.shape[0]} rows for {seg.n} segments")
    return _finish("row_gather", a.data[seg.ids], (a,), lambda g: (seg.reduce(g),))


def segment_sum(a, seg: Segments) -> Tensor:
    a = _as_tensor(a)
    if a.shape[0] != len(seg):
        raise InvalidArgumentError(f"segment_sum: {a.shape[0]} rows for {len(seg)} ids")
    return _finish("segment_sum", seg.reduce(a.data), (a,), lambda g: (g[seg.ids],))


def segment_mean(a, seg: Segments) -> Tensor:
    a = _as_tensor(a)
    if a.shape[0] != len(seg):
        raise InvalidArgumentError(f"segment_mean: {a.shape[0]} rows for {len(seg)} ids")
    inv = 1.0 / np.maximum(seg.counts, 1.0)
    inv = inv.reshape((-1,) + (1,) * (a.ndim - 1))
    return _finish("segment_mean", seg.reduce(a.data) * inv, (a,), lambda g: ((g * inv)[seg.ids],))


def segment_softmax(a, seg: Segments) -> Tensor:
    """Softmax over the rows sharing a segment id, independently per column."""
    a = _as_tensor(a)
    x = a.data
    if x.shape[0] != len(seg):
        raise InvalidArgumentError(f"segment_softmax: {x.shape[0]} rows for {len(seg)} ids")
    top = np.full((seg.n,) + x.shape[1:], -np.inf)
    np.maximum.at(top, seg.ids, x)
    e = np.exp(x - top[seg.ids])
    out = e / seg.reduce(e)[seg.ids]

    def vjp(g):
        return (out * (g - seg.reduce(g * out)[seg.ids]),)

    return _finish("segment_softmax", out, (a,), vjp)


# --- reverse pass -----------------------------------------------------------------

def backward(tape: Tape, root: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to tape variables.

    Returns a mapping from each requested leaf tensor (all variables when
    ``wrt`` is None) to its gradient; leaves the root does not depend on get
    zeros.
    """
    if root.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise InvalidArgumentError("root was not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.node] = np.ones_like(root.data)
    for idx in range(root.node, -1, -1):
        g = grads[idx]
        node = tape.nodes[idx]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    if wrt is None:
        wrt = tape.variables
    return {t: (grads[t.node] if grads[t.node] is not None else np.zeros_like(t.data)) for t in wrt}


# --- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = value
            continue
        m = state.first_moment.get(name, np.zeros_like(value))
        v = state.second_moment.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        updated[name] = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return updated


# --- finite differences -----------------------------------------------------------------

def directional_check(
    fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    direction: str = "gradient",
    refine: tuple[float, ...] = (10.0, 0.1),
) -> dict[str, float]:
    """Relative error of each gradient against a central difference.

    For every parameter a unit direction ``v`` of the parameter's shape is
    chosen and ``<grad, v>`` is compared with
    ``(fn(p + step v) - fn(p - step v)) / (2 step)``. With
    ``direction="gradient"`` (the default) ``v`` is the normalised claimed
    gradient, which makes the slope under test as large as possible and so
    least exposed to round-off in ``fn``; a wrong sign or scale still shows.
    ``direction="random"`` draws ``v`` from a standard normal instead.

    The error denominator is floored at ``floor * max(1, |fn(params)|)`` so a
    parameter whose true derivative is zero is judged by the absolute size of
    the finite-difference noise rather than by 0/0.

    A central difference is invalid when the step straddles a kink (a
    leaky-ReLU switching sign) or when round-off swamps a small slope. If the
    error at ``step`` is above ``floor``, the steps ``step * r`` for ``r`` in
    ``refine`` are also tried, together with the forward and backward
    one-sided differences at each step (near a kink the side facing away from
    it stays smooth), and the smallest error is reported. A wrong reverse rule
    disagrees with every one of these slopes, so it still fails.
    """
    if direction not in ("gradient", "random"):
        raise InvalidArgumentError(f"unknown direction {direction!r}")
    rng = rng or np.random.default_rng(0)
    base = float(fn(params))
    floor_abs = floor * max(1.0, abs(base))
    errors = {}
    for name, value in params.items():
        g = np.asarray(grads[name])
        norm = np.linalg.norm(g)
        if direction == "gradient" and norm > 0:
            v = g / norm
        else:
            v = rng.standard_normal(value.shape)
            v /= np.linalg.norm(v)
        analytic = float(np.sum(g * v))
        best = np.inf
        for h in (step, *(step * r for r in refine)):
            plus = dict(params)
            minus = dict(params)
            plus[name] = value + h * v
            minus[name] = value - h * v
            up, down = float(fn(plus)), float(fn(minus))
            for numeric in ((up - down) / (2.0 * h), (up - base) / h, (base - down) / h):
                best = min(best, abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor_abs))
            if best <= floor:
                break
        errors[name] = best
    return errors


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Scalar-valued probes, one per differentiable op, resolved at call time."""
    mod = globals()
    seg = Segments(np.array([0, 2, 1, 0, 2]), 3)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    sym = lambda *s: rng.standard_normal(s)  # noqa: E731
    w = sym(5, 3)
    w5 = sym(5, 5)
    return {
        "add": (lambda a, b: mod["sum"](mod["add"](a, b) * w), [sym(5, 3), sym(1, 3)]),
        "sub": (lambda a, b: mod["sum"](mod["sub"](a, b) * w), [sym(5, 3), sym(5, 1)]),
        "neg": (lambda a: mod["sum"](mod["neg"](a) * w), [sym(5, 3)]),
        "mul": (lambda a, b: mod["sum"](mod["mul"](a, b) * w), [sym(5, 3), sym(5, 3)]),
        "div": (lambda a, b: mod["sum"](mod["div"](a, b) * w), [sym(5, 3), pos(5, 3)]),
        "matmul": (lambda a, b: mod["sum"](mod["matmul"](a, b) * w), [sym(5, 4), sym(4, 3)]),
        "exp": (lambda a: mod["sum"](mod["exp"](a) * w), [sym(5, 3)]),
        "log": (lambda a: mod["sum"](mod["log"](a) * w), [pos(5, 3)]),
        "log2": (lambda a: mod["sum"](mod["log2"](a) * w), [pos(5, 3)]),
        "sigmoid": (lambda a: mod["sum"](mod["sigmoid"](a) * w), [sym(5, 3)]),
        "leaky_relu": (lambda a: mod["sum"](mod["leaky_relu"](a) * w), [sym(5, 3) + 0.3 * np.sign(sym(5, 3))]),
        "clamp_min": (lambda a: mod["sum"](mod["clamp_min"](a, 0.0) * w), [sym(5, 3)]),
        "mean": (lambda a: mod["mean"](a * w, axis=0)[1] * 1.0, [sym(5, 3)]),
        "reshape_transpose": (lambda a: mod["sum"](mod["transpose"](mod["reshape"](a, (3, 5))) * w), [sym(5, 3)]),
        "concat": (lambda a, b: mod["sum"](mod["concat"]([a, b], axis=1) * w5), [sym(5, 3), sym(5, 2)]),
        "softmax": (lambda a: mod["sum"](mod["row_softmax"](a) * w) + mod["sum"](mod["col_softmax"](a) * w),
                    [sym(5, 3)]),
        "row_gather": (lambda a: mod["sum"](mod["row_gather"](a, seg) * w), [sym(3, 3)]),
        "segment_sum": (lambda a: mod["sum"](mod["segment_sum"](a, seg) * w[:3]), [sym(5, 3)]),
        "segment_mean": (lambda a: mod["sum"](mod["segment_mean"](a, seg) * w[:3]), [sym(5, 3)]),
        "segment_softmax": (lambda a: mod["sum"](mod["segment_softmax"](a, seg) * w), [sym(5, 3)]),
    }


def op_gradcheck(step: float = 1e-6, seed: int = 0) -> dict[str, float]:
    """Relative error of every op's reverse rule against central differences.

    Every input entry is perturbed individually, so a wrong rule anywhere in
    an op shows up under that op's name.
    """
    rng = np.random.default_rng(seed)
    errors = {}
    for name, (fn, inputs) in _op_cases(rng).items():
        tape = Tape()
        leaves = [tape.variable(x) for x in inputs]
        grads = backward(tape, fn(*leaves), leaves)
        worst = 0.0
        for k, x in enumerate(inputs):
            numeric = np.zeros_like(x)
            for idx in np.ndindex(x.shape):
                shifted = [v.copy() for v in inputs]
                shifted[k][idx] = x[idx] + step
                up = float(fn(*[Tensor(v) for v in shifted]).data)
                shifted[k][idx] = x[idx] - step
                down = float(fn(*[Tensor(v) for v in shifted]).data)
                numeric[idx] = (up - down) / (2.0 * step)
            analytic = grads[leaves[k]]
            scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
            worst = max(worst, float(np.abs(numeric - analytic).max() / scale))
        errors[name] = worst
    return errors
