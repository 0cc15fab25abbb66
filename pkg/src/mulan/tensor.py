"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tape` is built fresh for every differentiated computation.  Leaves
enter it through :meth:`Tape.watch`; every op applied to a tracked tensor
appends one node holding its vector-Jacobian closure.  :func:`backward`
walks the nodes once, newest first.

Arrays are float32 by default.  Reductions and matmul accumulate in float64.
Passing float64 data keeps the whole graph in float64, which the gradient
checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_FLOATS = (np.float32, np.float64)
DIV_EPS = 1e-30


class TapeError(RuntimeError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in _FLOATS:
        arr = arr.astype(np.float32)
    return arr


@dataclass
class Node:
    kind: str
    inputs: tuple
    vjp: Callable | None


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    gradients: dict = field(default_factory=dict)

    def _add(self, kind, inputs, vjp) -> int:
        self.nodes.append(Node(kind, tuple(inputs), vjp))
        return len(self.nodes) - 1

    def watch(self, x) -> "Tensor":
        """Register ``x`` as a leaf whose gradient :func:`backward` will fill."""
        data = x.data if isinstance(x, Tensor) else _as_array(x)
        return Tensor(data, tape=self, node=self._add("leaf", (), None))

    def grad(self, leaf: "Tensor") -> np.ndarray:
        if leaf.tape is not self or self.nodes[leaf.node].kind != "leaf":
            raise TapeError("tensor is not a leaf of this tape")
        g = self.gradients.get(leaf.node)
        return np.zeros_like(leaf.data) if g is None else g


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)


def constant(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and not isinstance(x, np.ndarray) else None
    return Tensor(x, dtype=dtype)


def _lift(*xs) -> list[Tensor]:
    ref = next((x for x in xs if isinstance(x, Tensor)), None)
    return [constant(x, ref) for x in xs]


def _check(kind, out):
    # a sum is non-finite whenever any term is (overflow aside), at half the cost
    if out.size and not np.isfinite(np.add.reduce(out, axis=None)) and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from op '{kind}'")
    return out


def _record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    _check(kind, out)
    tapes = {id(x.tape): x.tape for x in inputs if x.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise TapeError(f"op '{kind}' mixes tensors from different tapes")
    (tape,) = tapes.values()
    node = tape._add(kind, [x.node if x.tape is not None else None for x in inputs], vjp)
    return Tensor(out, tape=tape, node=node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _result_dtype(*xs):
    return np.result_type(*[x.data for x in xs])


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary(kind, a, b):
    a, b = _lift(a, b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    dt = _result_dtype(a, b)
    x, y = a.data.astype(dt, copy=False), b.data.astype(dt, copy=False)
    if kind == "add":
        out = x + y
        vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif kind == "sub":
        out = x - y
        vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif kind == "mul":
        out = x * y
        vjp = lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape))
    elif kind == "div":
        if np.any(np.abs(y) < DIV_EPS):
            raise ZeroDivisionError(f"div: denominator magnitude below {DIV_EPS}")
        out = x / y
        vjp = lambda g: (_unbroadcast(g / y, a.shape), _unbroadcast(-g * out / y, b.shape))
    else:  # pragma: no cover
        raise ValueError(kind)
    return _record(kind, out.astype(dt, copy=False), (a, b), vjp)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _softplus(x):
    return np.logaddexp(np.zeros((), x.dtype), x)


def _unary(kind, a):
    (a,) = _lift(a)
    x = a.data
    with np.errstate(all="ignore"):
        if kind == "exp":
            out = np.exp(x)
            d = lambda g: g * out
        elif kind == "expm1":
            out = np.expm1(x)
            d = lambda g: g * (out + 1)
        elif kind == "log":
            out = np.log(x)
            d = lambda g: g / x
        elif kind == "sigmoid":
            out = _sigmoid(x)
            d = lambda g: g * out * (1 - out)
        elif kind == "softplus":
            out = _softplus(x)
            d = lambda g: g * _sigmoid(x)
        elif kind == "sqrt":
            out = np.sqrt(x)
            d = lambda g: g * 0.5 / out
        elif kind == "square":
            out = x * x
            d = lambda g: g * 2 * x
        elif kind == "neg":
            out = -x
            d = lambda g: -g
        elif kind == "swish":
            s = _sigmoid(x)
            out = x * s
            d = lambda g: g * (s + out * (1 - s))
        elif kind == "sin":
            out = np.sin(x)
            d = lambda g: g * np.cos(x)
        elif kind == "cos":
            out = np.cos(x)
            d = lambda g: -g * np.sin(x)
        else:
            raise ValueError(f"unknown elementwise op '{kind}'")
    return _record(kind, out.astype(x.dtype, copy=False), (a,), lambda g: (d(g),))


UNARY_OPS = ("exp", "expm1", "log", "sigmoid", "softplus", "sqrt", "square", "neg", "swish", "sin", "cos")
BINARY_OPS = ("add", "sub", "mul", "div")


def elementwise(kind: str, *inputs):
    if kind in BINARY_OPS:
        if len(inputs) != 2:
            raise ValueError(f"{kind} takes two inputs")
        return _binary(kind, *inputs)
    if len(inputs) != 1:
        raise ValueError(f"{kind} takes one input")
    return _unary(kind, inputs[0])


exp = lambda x: _unary("exp", x)
expm1 = lambda x: _unary("expm1", x)
log = lambda x: _unary("log", x)
sigmoid = lambda x: _unary("sigmoid", x)
softplus = lambda x: _unary("softplus", x)
sqrt = lambda x: _unary("sqrt", x)
square = lambda x: _unary("square", x)
neg = lambda x: _unary("neg", x)
swish = lambda x: _unary("swish", x)
sin = lambda x: _unary("sin", x)
cos = lambda x: _unary("cos", x)


def power(x, p):
    """x ** p for a constant real exponent."""
    (x,) = _lift(x)
    p = float(p)
    with np.errstate(all="ignore"):
        out = np.power(x.data, p).astype(x.dtype, copy=False)
    return _record("power", out, (x,), lambda g: (g * p * np.power(x.data, p - 1.0),))


def log_sigmoid(x):
    return neg(softplus(neg(x)))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    dt = _result_dtype(a, b)
    A, B = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (A @ B).astype(dt)

    def vjp(g):
        G = g.astype(np.float64)
        return (G @ B.T).astype(a.dtype), (A.T @ G).astype(b.dtype)

    return _record("matmul", out, (a, b), vjp)


def bmm(a, b):
    """Batched matmul over leading axes, ``(..., n, k) @ (..., k, m)``."""
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    dt = _result_dtype(a, b)
    A, B = a.data.astype(np.float64), b.data.astype(np.float64)
    out = np.matmul(A, B).astype(dt)

    def vjp(g):
        G = g.astype(np.float64)
        ga = _unbroadcast(np.matmul(G, np.swapaxes(B, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), G), b.shape)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _record("bmm", out, (a, b), vjp)


def transpose(x, axes):
    (x,) = _lift(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                   lambda g: (np.transpose(g, inv),))


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x, axes=None, keepdims=False):
    (x,) = _lift(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction '{kind}'")
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    if kind == "mean":
        out = out / count
    out = np.asarray(out).astype(x.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        g = np.broadcast_to(g, x.shape)
        if kind == "mean":
            g = g / count
        return (np.array(g, dtype=x.dtype),)

    return _record(kind, out, (x,), vjp)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False):
    return reduce("mean", x, axis, keepdims)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x, shape):
    (x,) = _lift(x)
    old = x.shape
    out = x.data.reshape(shape)
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def getitem(x, idx):
    (x,) = _lift(x)
    out = np.array(x.data[idx])

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", out, (x,), vjp)


def concat(xs: Sequence, axis=-1):
    xs = _lift(*xs)
    dt = _result_dtype(*xs)
    out = np.concatenate([x.data.astype(dt, copy=False) for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(p.astype(x.dtype, copy=False) for p, x in zip(np.split(g, bounds, axis=axis), xs))

    return _record("concat", out, xs, vjp)


def repeat_rows(x, reps: int):
    """(B, ...) -> (B * reps, ...); row b appears ``reps`` times consecutively."""
    (x,) = _lift(x)
    out = np.repeat(x.data, reps, axis=0)
    shape = x.shape
    return _record("repeat_rows", out, (x,), lambda g: (g.reshape((shape[0], reps) + shape[1:]).sum(axis=1),))


def stop_gradient(x):
    (x,) = _lift(x)
    return Tensor(x.data)


def straight_through(logits, hard):
    """Forward value ``hard``, gradient passed to ``logits`` unchanged."""
    logits, hard = _lift(logits, hard)
    if logits.shape != hard.shape:
        raise ValueError("straight_through: shape mismatch")
    return _record("straight_through", hard.data.astype(logits.dtype), (logits, hard), lambda g: (g, None))


def log_softmax(x, axis=-1):
    (x,) = _lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _record("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> dict:
    """Fill ``tape.gradients`` with d(root)/d(leaf) for every reachable leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.tape is not tape:
        raise TapeError("root was not recorded on this tape")
    tape.gradients = {}
    pending = {root.node: np.ones_like(root.data)}
    for idx in range(root.node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.kind == "leaf":
            tape.gradients[idx] = g
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if inp is None or gi is None:
                continue
            pending[inp] = pending[inp] + gi if inp in pending else gi
    return tape.gradients


def vjp(f: Callable[[Tensor], Tensor], x, u) -> np.ndarray:
    """Return ``u^T (df/dx)`` from one reverse pass."""
    tape = Tape()
    xt = tape.watch(x)
    y = f(xt)
    u = np.asarray(u)
    if u.shape != y.shape:
        raise ValueError(f"cotangent shape {u.shape} does not match output shape {y.shape}")
    if not y.tracked:
        return np.zeros_like(xt.data)
    backward(tape, reduce("sum", mul(y, Tensor(u, dtype=y.dtype))))
    return tape.grad(xt)


def value_and_grad(f: Callable[[dict], Tensor], params: dict) -> tuple[float, dict]:
    """Evaluate scalar ``f(params)`` and its gradient for every entry of ``params``."""
    tape = Tape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    out = f(watched)
    if not out.tracked:
        return out.item(), {k: np.zeros_like(np.asarray(v.data if isinstance(v, Tensor) else v)) for k, v in params.items()}
    backward(tape, out)
    return out.item(), {k: tape.grad(t) for k, t in watched.items()}
