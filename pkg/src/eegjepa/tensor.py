"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy buffer (float32 by default, float64 for gradient
checking). Every differentiable operation records an implicit tape node on its
output: the op name, references to the inputs, and a closure holding whatever
intermediates the backward rule needs. ``backward()`` on a scalar walks the
graph in reverse topological order and accumulates gradients into every
``requires_grad`` leaf. Graphs are acyclic by construction (nodes only ever
reference earlier nodes).

Binary elementwise ops follow numpy singleton broadcasting (the lower-rank
operand is left-padded with 1s; size-1 dims stretch). Gradients of broadcast
operands are summed back over the stretched axes.

Graph recording can be suspended with ``no_grad()``; ops executed inside the
context produce detached constants and leave the tape-node counter untouched.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside record nothing and return constants."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def tape_node_count() -> int:
    """Number of tape nodes recorded so far in this thread (diagnostic)."""
    return getattr(_state, "node_count", 0)


def _bump_node_count():
    _state.node_count = getattr(_state, "node_count", 0) + 1


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``data`` is always a contiguous numpy array; ``grad`` (once populated by
    ``backward``) has the same shape and dtype. Tensors are immutable after
    creation except through the optimizer, which updates ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray)
                                  and data.dtype == np.float64):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{op}{grad})"

    # -- graph plumbing --------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, recording a tape node if grad mode is on."""
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.op = op
            out._parents = tuple(parents)
            out._backward = backward
            _bump_node_count()
        else:
            out.requires_grad = False
            out.op = None
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = (self.grad + g).astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar.

        Every ``requires_grad`` leaf reachable from ``self`` receives
        d(self)/d(leaf) in its ``grad`` slot. Leaf gradients accumulate
        across repeated calls; zero them explicitly between steps.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() expects a scalar, got shape {self.shape}")
        if self.is_leaf():
            if self.requires_grad:
                self._accumulate(np.ones_like(self.data))
            return
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        # Non-leaf grads are scratch space owned by this sweep.
        for node in topo:
            if not node.is_leaf():
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, (list, np.ndarray)):
            return index_select(self, key, axis=0)
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# -- broadcast helper -------------------------------------------------------

def _broadcast_shapes(sa: tuple, sb: tuple) -> tuple:
    """Output shape for singleton broadcasting; raises ShapeError otherwise."""
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(
            f"cannot broadcast shapes {sa} and {sb}: "
            "dims must match or be 1") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` (inverse of the broadcast)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- binary elementwise ops ---------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        a._accumulate(_unbroadcast(g * bd, a.shape))
        b._accumulate(_unbroadcast(g * ad, b.shape))

    return Tensor._result(ad * bd, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return Tensor._result(a.data * a.data.dtype.type(c), (a,), "scale", bw)


# -- unary elementwise ops ----------------------------------------------------

def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def bw(g):
        a._accumulate(g * p * ad ** (p - 1.0))

    return Tensor._result(ad ** a.data.dtype.type(p), (a,), "pow", bw)


def exp(a: Tensor) -> Tensor:
    out_d = np.exp(a.data)

    def bw(g):
        a._accumulate(g * out_d)

    return Tensor._result(out_d, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        a._accumulate(g / ad)

    return Tensor._result(np.log(ad), (a,), "log", bw)


def absolute(a: Tensor) -> Tensor:
    ad = a.data

    def bw(g):
        a._accumulate(g * np.sign(ad))

    return Tensor._result(np.abs(ad), (a,), "abs", bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU with a closed-form derivative."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))

    def bw(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return Tensor._result(0.5 * x * (1.0 + t), (a,), "gelu", bw)


# -- reductions -----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return axis % ndim
    raise ShapeError(f"axis must be None or int, got {axis!r}")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.data.ndim)
    out_d = a.data.sum(axis=ax, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, shape))

    return Tensor._result(np.asarray(out_d), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.data.ndim)
    n = a.data.size if ax is None else a.shape[ax]
    out_d = a.data.mean(axis=ax, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, shape) / n)

    return Tensor._result(np.asarray(out_d), (a,), "mean", bw)


# -- shape ops --------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def bw(g):
        a._accumulate(g.reshape(old))

    return Tensor._result(np.ascontiguousarray(a.data.reshape(shape)),
                          (a,), "reshape", bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accumulate(g.transpose(inv))

    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)),
                          (a,), "transpose", bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    ax = axis % ts[0].data.ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor._result(np.concatenate([t.data for t in ts], axis=ax),
                          ts, "concat", bw)


def slice_(a: Tensor, key) -> Tensor:
    out_d = a.data[key]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=np.asarray(g).dtype)
        full[key] = np.asarray(g).reshape(np.shape(full[key]))
        a._accumulate(full)

    return Tensor._result(np.ascontiguousarray(out_d), (a,), "slice", bw)


def index_select(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis``; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.data.ndim
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        a._accumulate(full)

    return Tensor._result(np.ascontiguousarray(np.take(a.data, idx, axis=ax)),
                          (a,), "index_select", bw)


# -- contractions ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul expects (m,k)x(k,n), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        a._accumulate(g @ bd.T)
        b._accumulate(ad.T @ g)

    return Tensor._result(ad @ bd, (a, b), "matmul", bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading dim: (B,m,k) x (B,k,n)."""
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(
            f"bmm expects (B,m,k)x(B,k,n), got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        a._accumulate(g @ bd.transpose(0, 2, 1))
        b._accumulate(ad.transpose(0, 2, 1) @ g)

    return Tensor._result(ad @ bd, (a, b), "bmm", bw)


# -- softmax family --------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_d = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * out_d).sum(axis=ax, keepdims=True)
        a._accumulate(out_d * (g - dot))

    return Tensor._result(out_d, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.data.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out_d = shifted - lse
    soft = np.exp(out_d)

    def bw(g):
        a._accumulate(g - soft * g.sum(axis=ax, keepdims=True))

    return Tensor._result(out_d, (a,), "log_softmax", bw)


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued and ``x`` 64-bit; the relative error uses the
    symmetric denominator |analytic| + |numeric| + 1e-12 per element.
    """
    if x.data.dtype != np.float64:
        raise ContractError("grad_check requires a float64 input tensor")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = (probe.grad if probe.grad is not None
                else np.zeros_like(probe.data))

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(probe.data.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(probe.data.copy())).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(probe.data.shape)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
