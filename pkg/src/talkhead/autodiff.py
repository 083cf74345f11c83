"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers the operation
that produced it (define-by-run).  :func:`backward` walks those records in
reverse creation order and accumulates ``grad`` on leaf tensors created with
``requires_grad=True``.

Broadcasting is deliberately limited: binary ops accept a Python scalar or a
single-element tensor on either side; anything else must match shapes
exactly.  Row-wise bias addition goes through :func:`linear`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "Node", "DimensionError", "DomainError", "NumericInputError",
    "ContractError", "tensor", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "square", "exp", "log", "tanh", "sigmoid",
    "softplus", "matmul", "linear", "transpose", "reshape", "concat", "slice_",
    "sum_", "mean", "logsumexp", "softmax", "log_softmax", "normalize_rows",
    "cosine_similarity", "cosine_matrix", "gradcheck",
]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (thread-local)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: inputs, output and the vector-Jacobian rule."""

    __slots__ = ("seq", "name", "inputs", "vjp")

    def __init__(self, name: str, inputs: tuple, vjp: Callable):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __getitem__(self, index) -> "Tensor":
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*xs: Tensor) -> bool:
    return _grad_enabled() and any(x.requires_grad for x in xs)


def _result(data: np.ndarray, name: str, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _needs_grad(*inputs):
        out.requires_grad = True
        out._node = Node(name, inputs, vjp)
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if np.isnan(data).any():
        raise NumericInputError(f"{op}: NaN in input")


class Tape:
    """Ordered record of the operations reachable from an output.

    The tape is traced from the graph at backward time, so nothing is kept
    alive once the output tensor is dropped.  Nodes are sorted by creation
    sequence, which is a valid topological order for define-by-run graphs.
    """

    def __init__(self, nodes: list[tuple[Node, Tensor]]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[tuple[Node, Tensor]] = []
        stack = [output]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            found.append((node, t))
            stack.extend(node.inputs)
        found.sort(key=lambda nt: nt[0].seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node, out in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = node.vjp(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate across calls; zero them explicitly between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.trace(loss).run_backward(loss, seed)


# -- binary elementwise ------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return a.shape if b.size == 1 else b.shape


def _scalar_view(x: Tensor, shape: tuple) -> np.ndarray:
    # single-element operands collapse to 0-d so numpy broadcasting stays trivial
    return x.data.reshape(()) if x.shape != shape and x.size == 1 else x.data


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    shape = _out_shape(a, b)
    data = _scalar_view(a, shape) + _scalar_view(b, shape)
    return _result(data, "add", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    shape = _out_shape(a, b)
    data = _scalar_view(a, shape) - _scalar_view(b, shape)
    return _result(data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    shape = _out_shape(a, b)
    ad, bd = _scalar_view(a, shape), _scalar_view(b, shape)
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    shape = _out_shape(a, b)
    ad, bd = _scalar_view(a, shape), _scalar_view(b, shape)
    return _result(ad / bd, "div", (a, b),
                   lambda g: (_unbroadcast(g / bd, a.shape),
                              _unbroadcast(-g * ad / (bd * bd), b.shape)))


# -- unary elementwise -------------------------------------------------------

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _result(-x.data, "neg", (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _result(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "log")
    if (x.data <= 0).any():
        raise DomainError("log: input must be strictly positive")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_np(x.data)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    return _result(y, "softplus", (x,), lambda g: (g * _sigmoid_np(x.data),))


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, "matmul", (a, b),
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``b`` (length n) added to every row."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    y = x.data @ w.data
    if b is None:
        return _result(y, "linear", (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    b = _as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match {w.shape}")
    return _result(y + b.data, "linear", (x, w, b),
                   lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {x.shape}")
    return _result(x.data.T.copy(), "transpose", (x,), lambda g: (g.T,))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _result(y, "reshape", (x,), lambda g: (g.reshape(old),))


def concat(xs: Iterable, axis: int = 0) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(data, "concat", xs, vjp)


def slice_(x, index) -> Tensor:
    """Basic (non-fancy) indexing with an adjoint that scatters back."""
    x = _as_tensor(x)
    y = x.data[index]
    if not isinstance(y, np.ndarray):
        y = np.array(y)
    else:
        y = y.copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(y, "slice", (x,), vjp)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- reductions --------------------------------------------------------------

def sum_(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    y = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(y, "sum", (x,), vjp)


def mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    y = (np.log(tot) + m).squeeze(axis)
    weights = s / tot
    return _result(y, "logsumexp", (x,),
                   lambda g: (np.expand_dims(g, axis) * weights,))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _result(y, "log_softmax", (x,),
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- cosine similarity -------------------------------------------------------

NORM_EPS = 1e-8


def normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """Divide each row of a matrix (or a vector) by ``max(‖row‖, eps)``."""
    x = _as_tensor(x)
    nrm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    floored = nrm <= eps
    den = np.where(floored, eps, nrm)
    y = x.data / den

    def vjp(g):
        # below the floor the map is linear, above it the usual x / |x|
        proj = (g * x.data).sum(axis=-1, keepdims=True)
        return (g / den - np.where(floored, 0.0, x.data * proj / den ** 3),)

    return _result(y, "normalize_rows", (x,), vjp)


def cosine_similarity(u, v) -> Tensor:
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape or u.data.ndim != 1:
        raise DimensionError(f"cosine_similarity: need equal 1-D shapes, got {u.shape} and {v.shape}")
    return sum_(mul(normalize_rows(u), normalize_rows(v)))


def cosine_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` (n×d) and ``b`` (m×d)."""
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# -- recurrent cell ----------------------------------------------------------

def gru_step(xw, h, u) -> Tensor:
    """Fused GRU update from the input projection ``xw`` (B x 3H, blocks z|r|n).

    z = sig(xw_z + h U_z), r = sig(xw_r + h U_r),
    n = tanh(xw_n + r * (h U_n)), h' = (1 - z) * n + z * h.
    """
    xw, h, u = _as_tensor(xw), _as_tensor(h), _as_tensor(u)
    H = h.shape[-1]
    if xw.shape[-1] != 3 * H or u.shape != (H, 3 * H) or xw.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_step: xw {xw.shape}, h {h.shape}, U {u.shape} are inconsistent")
    hu = h.data @ u.data
    z = _sigmoid_np(xw.data[:, :H] + hu[:, :H])
    r = _sigmoid_np(xw.data[:, H:2 * H] + hu[:, H:2 * H])
    c = hu[:, 2 * H:]
    n = np.tanh(xw.data[:, 2 * H:] + r * c)
    out = (1.0 - z) * n + z * h.data

    def vjp(g):
        da_n = g * (1.0 - z) * (1.0 - n * n)
        da_z = g * (h.data - n) * z * (1.0 - z)
        da_r = da_n * c * r * (1.0 - r)
        dxw = np.concatenate([da_z, da_r, da_n], axis=1)
        dhu = np.concatenate([da_z, da_r, da_n * r], axis=1)
        return dxw, g * z + dhu @ u.data.T, h.data.T @ dhu

    return _result(out, "gru_step", (xw, h, u), vjp)


# -- testing helper ----------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, 1e-3)``, so
    coordinates whose gradients are both tiny are compared absolutely.
    """
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = fn().item()
                flat[i] = orig - step
                lo = fn().item()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(p.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)) if p.size else 0.0)
    return worst


def parameters_finite(params: dict[str, Tensor]) -> str | None:
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            return name
    return None

