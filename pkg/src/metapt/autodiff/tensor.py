"""Dense reverse-mode autodiff over float64 numpy arrays.

Every primitive records its inputs and a vector-Jacobian product written in
terms of other primitives. Running a backward pass with ``create_graph=True``
therefore records the adjoint computation itself, so gradients can be
differentiated again (needed for second-order MAML).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()
_state = threading.local()


class GradError(RuntimeError):
    """Raised for malformed differentiation requests."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward or adjoint value contains NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite value in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, c):
        return power(self, c)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------- shape ops

def _sum_to_shape(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _make(_sum_to_shape(a.data, shape), (a,),
                 lambda g: (broadcast_to(g, in_shape),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(data, (a,), lambda g: (sum_to(g, in_shape),), "broadcast_to")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, in_shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    in_shape = a.shape

    def vjp(g):
        parts = []
        if start > 0:
            s = list(in_shape)
            s[axis] = start
            parts.append(Tensor(np.zeros(s)))
        parts.append(g)
        if stop < in_shape[axis]:
            s = list(in_shape)
            s[axis] = in_shape[axis] - stop
            parts.append(Tensor(np.zeros(s)))
        return (concat(parts, axis),)

    return _make(a.data[tuple(idx)].copy(), (a,), vjp, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(slice_axis(g, axis, int(bounds[i]), int(bounds[i + 1]))
                     for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def gather_rows(table: Tensor, idx) -> Tensor:
    """``table[idx]`` for an integer index array of any shape (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    n_rows = table.shape[0]
    return _make(table.data[idx], (table,),
                 lambda g: (scatter_rows(g, idx, n_rows),), "gather_rows")


def scatter_rows(src: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Adjoint of gather_rows: add ``src`` rows into a zero table at ``idx``."""
    row_shape = src.shape[idx.ndim:]
    out = np.zeros((n_rows,) + row_shape)
    np.add.at(out, idx.reshape(-1), src.data.reshape((-1,) + row_shape))
    return _make(out, (src,), lambda g: (gather_rows(g, idx),), "scatter_rows")


# ----------------------------------------------------------- arithmetic ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to(ga, sa), sum_to(gb, sb)

    return _make(a.data / b.data, (a, b), vjp, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise GradError("matmul operands must be at least 2-D")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return sum_to(matmul(g, swap_last(b)), sa), sum_to(matmul(swap_last(a), g), sb)

    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def power(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data ** c, (a,), lambda g: (mul(g, mul(power(a, c - 1.0), c)),), "pow")


def exp(a: Tensor) -> Tensor:
    out_ref = []

    def vjp(g):
        return (mul(g, out_ref[0]),)

    out = _make(np.exp(a.data), (a,), vjp, "exp")
    out_ref.append(out)
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def tanh(a: Tensor) -> Tensor:
    out_ref = []

    def vjp(g):
        t = out_ref[0]
        return (mul(g, sub(1.0, mul(t, t))),)

    out = _make(np.tanh(a.data), (a,), vjp, "tanh")
    out_ref.append(out)
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(DTYPE)
    return _make(a.data * mask, (a,), lambda g: (mul(g, mask),), "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_ref = []

    def vjp(g):
        s = out_ref[0]
        gs = mul(g, s)
        return (sub(gs, mul(s, tsum(gs, axis, keepdims=True))),)

    out = _make(e / e.sum(axis=axis, keepdims=True), (a,), vjp, "softmax")
    out_ref.append(out)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_ref = []

    def vjp(g):
        return (sub(g, mul(exp(out_ref[0]), tsum(g, axis, keepdims=True))),)

    out = _make(z - lse, (a,), vjp, "log_softmax")
    out_ref.append(out)
    return out


# ------------------------------------------------------------- composites

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    return add(mul(mul(xc, power(add(var, eps), -0.5)), gamma), beta)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    inner = mul(add(x, mul(power(x, 3.0), 0.044715)), _GELU_C)
    return mul(mul(x, 0.5), add(tanh(inner), 1.0))


def take_along_last(a: Tensor, idx) -> Tensor:
    """Pick ``a[i, idx[i]]`` from a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    n, k = a.shape
    flat = reshape(a, (n * k, 1))
    return reshape(gather_rows(flat, np.arange(n) * k + idx), (n,))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row-wise softmax."""
    return neg(mean(take_along_last(log_softmax(logits, -1), targets)))


# ------------------------------------------------------------ differentiation

def _reachable(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    # creation ids give a topological order; reverse it for the backward sweep
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def grad(loss: Tensor, params: Sequence[Tensor], create_graph: bool = False,
         allow_unused: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``params``.

    With ``create_graph`` the returned gradients are themselves recorded and can
    be differentiated. A param that ``loss`` does not depend on raises
    ``GradError`` unless ``allow_unused`` is set, in which case its gradient is
    a zero tensor.
    """
    if loss.size != 1:
        raise GradError(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    order = _reachable(loss)
    in_graph = {id(t) for t in order}
    for i, p in enumerate(params):
        if id(p) not in in_graph and not allow_unused:
            raise GradError(f"param {i} (shape {p.shape}) is not part of the graph")

    adj: dict[int, Tensor] = {id(loss): Tensor(np.ones(loss.shape))}
    with grad_mode(create_graph):
        for node in order:
            g = adj.get(id(node))
            if g is None or node._vjp is None:
                continue
            if not np.all(np.isfinite(g.data)):
                raise NonFiniteError(f"non-finite adjoint at {node.op}")
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                prev = adj.get(id(parent))
                adj[id(parent)] = pg if prev is None else add(prev, pg)

    out = []
    for p in params:
        g = adj.get(id(p))
        if g is None:
            g = Tensor(np.zeros(p.shape))
        elif not np.all(np.isfinite(g.data)):
            raise NonFiniteError("non-finite gradient")
        out.append(g)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f returned a non-finite value at coordinate {i}")
        res[i] = (hi - lo) / (2 * eps)
    return out
