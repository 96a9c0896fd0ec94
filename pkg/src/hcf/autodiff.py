"""Eager reverse-mode automatic differentiation over dense float64 arrays.

Each primitive computes its output immediately and, when any input requires a
gradient, attaches the inputs and a backward closure to the output. Calling
:func:`backward` on a scalar linearises the graph into a
:class:`ComputationTape` (inputs before consumers) and walks it in reverse,
visiting each node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's rule."""

    def __init__(self, primitive: str, message: str):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording backward closures."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if type(data) is np.ndarray and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.data.shape})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# linear algebra and structure ---------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-D ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "no inputs")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", f"incompatible shapes {[t.shape for t in ts]} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            g[(slice(None),) * ax + (slice(lo, hi),)] for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack", f"shapes differ: {[t.shape for t in ts]}")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), "stack", ts, bw)


class SliceGrad:
    """Gradient that is non-zero only on ``parent[idx]``; accumulated in place."""

    __slots__ = ("idx", "g")

    def __init__(self, idx, g):
        self.idx = idx
        self.g = g


_BASIC_INDEX = (slice, int, np.integer)


def _is_basic_index(idx) -> bool:
    if type(idx) is slice:
        return True
    for p in idx if type(idx) is tuple else (idx,):
        if not (p is Ellipsis or isinstance(p, _BASIC_INDEX)):
            return False
    return True


def getitem(a, idx) -> Tensor:
    """Basic slicing / indexing (the ``slice`` primitive)."""
    a = as_tensor(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("slice", f"{exc} for shape {a.shape}") from None

    if _is_basic_index(idx):
        def bw(g):
            return (SliceGrad(idx, g),)
    else:
        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

    return _make(out, "slice", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def tile_rows(a, reps: int) -> Tensor:
    """Repeat ``a`` ``reps`` times along axis 0 (block order, like ``np.tile``)."""
    a = as_tensor(a)
    if a.ndim < 1 or reps < 1:
        raise ShapeError("tile_rows", f"cannot tile {a.shape} x{reps}")
    n = a.shape[0]

    def bw(g):
        return (g.reshape((reps, n) + a.shape[1:]).sum(axis=0),)

    return _make(np.tile(a.data, (reps,) + (1,) * (a.ndim - 1)), "tile_rows", (a,), bw)


# elementwise unary --------------------------------------------------------

def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def bounded(a, low: float, high: float) -> Tensor:
    """Map reals into ``[low, high]`` with a scaled, shifted sigmoid."""
    return add(mul(sigmoid(a), high - low), low)


# reductions ---------------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, "sum", (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / n)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": getitem,
    "reshape": reshape,
    "tile_rows": tile_rows,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum,
    "mean": mean,
}


def apply_primitive(op: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# backward -----------------------------------------------------------------

class ComputationTape:
    """Nodes reachable from a root, ordered so inputs precede their consumers."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> ComputationTape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ShapeError("backward", f"root must be scalar, got shape {root.shape}")
    tape = ComputationTape.from_root(root)
    if not root.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    # buffers allocated here may be updated in place; others may alias upstream arrays
    owned: set[int] = set()
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            buf = grads.get(key)
            if isinstance(pg, SliceGrad):
                if buf is None:
                    buf = np.zeros_like(parent.data)
                elif key not in owned:
                    buf = buf.copy()
                buf[pg.idx] += pg.g
                grads[key] = buf
                owned.add(key)
            elif buf is None:
                grads[key] = pg
            elif key in owned:
                buf += pg
            else:
                grads[key] = buf + pg
                owned.add(key)
    return tape


# gradient checking --------------------------------------------------------

def finite_diff_check(loss_fn: Callable[[], Tensor], store, step: float = 1e-5,
                      tol: float = 1e-4, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> dict:
    """Compare analytic gradients with central differences for every parameter.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values.
    The error for one parameter tensor is ``max|a - n| / max(max|a|, max|n|)``
    over its checked coordinates. ``max_coords`` optionally limits how many
    coordinates per tensor are perturbed.
    """
    first = loss_fn()
    second = loss_fn()
    if first.data != second.data:
        raise RuntimeError("loss_fn is not deterministic; fix its random stream")
    store.zero_grad()
    backward(loss_fn())
    errors = {}
    for name, entry in store.items():
        value = entry.value
        analytic = value.grad.copy()
        flat = value.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        numeric = np.empty(len(coords))
        with no_grad():
            for j, c in enumerate(coords):
                orig = flat[c]
                flat[c] = orig + step
                up = loss_fn().item()
                flat[c] = orig - step
                down = loss_fn().item()
                flat[c] = orig
                numeric[j] = (up - down) / (2 * step)
        a = analytic.reshape(-1)[coords]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        diff = np.abs(a - numeric).max(initial=0.0)
        errors[name] = 0.0 if scale == 0.0 else diff / scale
    store.zero_grad()
    worst = max(errors.values(), default=0.0)
    return {"errors": errors, "max_error": worst, "passed": worst < tol}
