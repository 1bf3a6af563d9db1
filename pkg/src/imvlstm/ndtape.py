"""Dense float64 arrays with a small define-by-run reverse-mode tape.

Values are plain ``numpy.ndarray`` objects wrapped in :class:`Tensor`.  While a
:class:`Tape` is active, every primitive whose inputs include a tracked tensor
appends a node holding its inputs, output and vector-Jacobian product.  Calling
:func:`backward` walks those nodes once in reverse order.

All ops accept arbitrary leading batch axes where that makes sense; the
trailing axes carry the shapes named in the docstrings.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class _Node:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_state = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Append-only record of primitive operations.

    Use as a context manager; a tape is bound to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def watch(self, value, name: str | None = None) -> Tensor:
        return Tensor(value, requires_grad=True, name=name)

    def __len__(self) -> int:
        return len(self.nodes)


class MultiplyCount:
    """Running total of scalar multiplies done by the linear and ``mul`` primitives."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "MultiplyCount":
        if not hasattr(_state, "counters"):
            _state.counters = []
        _state.counters.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.remove(self)
        return False


def count_multiplies() -> MultiplyCount:
    """Context manager counting multiplies, e.g. ``with count_multiplies() as c: ...; c.total``."""
    return MultiplyCount()


def _tally(n: int) -> None:
    for c in getattr(_state, "counters", ()):
        c.total += int(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_value: np.ndarray,
            vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    tape = _active()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=track)
    if track:
        tape.nodes.append(_Node(tuple(inputs), out, vjp))
    return out


def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor]):
    """Gradient of scalar ``loss`` w.r.t. each tensor in ``params``.

    Returns a dict keyed like ``params`` (or a list, for a sequence).  Tensors
    with no path to ``loss`` get exact zeros.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.output), None)
        if g is None:
            continue
        grads = node.vjp(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = gi
    # leaves keep their adjoint in ``adj``; intermediate outputs were popped
    def grad_of(t: Tensor) -> np.ndarray:
        g = adj.get(id(t))
        if g is None:
            return np.zeros_like(t.value)
        return np.broadcast_to(g, t.shape).astype(DTYPE, copy=True)

    if isinstance(params, Mapping):
        return {k: grad_of(t) for k, t in params.items()}
    return [grad_of(t) for t in params]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op, a: Tensor, b: Tensor, name: str) -> np.ndarray:
    """Apply a numpy binary ``op``, turning broadcast failures into DimensionError."""
    try:
        return op(a.value, b.value)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record((a, b), _binary(np.add, a, b, "add"),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record((a, b), _binary(np.subtract, a, b, "sub"),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = _binary(np.multiply, a, b, "mul")
    _tally(out.size)
    return _record((a, b), out,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = _binary(np.divide, a, b, "div")
    return _record((a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record((a,), -a.value, lambda g: (-g,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record((a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record((a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _record((a,), np.log(x), lambda g: (g / x,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    def vjp(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)
    return _record((a,), out, vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _record((a,), x * x, lambda g: (2.0 * g * x,))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).value)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _record((a,), out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    s = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x - s),)
    return _record((a,), out, vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.value.size == 0 or a.shape[axis] == 0:
        raise ValueError("softmax of an empty array")
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _record((a,), out, vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.value.size == 0 or a.shape[axis] == 0:
        raise ValueError("log_softmax of an empty array")
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    out = x - (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _record((a,), out, vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for [..., p, q] x [..., q, r]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv
    _tally(out.size * av.shape[-1])

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)
    return _record((a, b), out, vjp)


def dense(x, w) -> Tensor:
    """Apply ``w`` [m, k] to the trailing axis of ``x`` [..., k], giving [..., m]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv.T
    _tally(out.size * wv.shape[1])

    def vjp(g):
        g2 = g.reshape(-1, wv.shape[0])
        return g @ wv, g2.T @ xv.reshape(-1, wv.shape[1])
    return _record((x, w), out, vjp)


def tensor_dot(w, h) -> Tensor:
    """Block-diagonal product: row ``n`` of the result is ``w[n] @ h[..., n, :]``.

    ``w`` is [N, d, k] and ``h`` is [..., N, k]; the result is [..., N, d].
    """
    w, h = as_tensor(w), as_tensor(h)
    if w.ndim != 3 or h.ndim < 2:
        raise DimensionError(f"tensor_dot: expected w [N,d,k] and h [...,N,k], got {w.shape} and {h.shape}")
    n, d, k = w.shape
    if h.shape[-2] != n or h.shape[-1] != k:
        raise DimensionError(f"tensor_dot: w {w.shape} does not match h {h.shape}")
    wv, hv = w.value, h.value
    lead = hv.shape[:-2]
    # one GEMM per variable over all leading positions
    h2 = hv.reshape(-1, n, k).transpose(1, 2, 0)
    out = np.ascontiguousarray((wv @ h2).transpose(2, 0, 1)).reshape(lead + (n, d))
    _tally(out.size * k)

    def vjp(g):
        # sum over all leading axes of outer(g[..., n, :], h[..., n, :])
        g2 = g.reshape(-1, n, d).transpose(1, 2, 0)
        h2 = hv.reshape(-1, n, k).transpose(1, 0, 2)
        gw = g2 @ h2
        gh = (np.swapaxes(wv, -1, -2) @ g2).transpose(2, 0, 1).reshape(lead + (n, k))
        return gw, gh
    return _record((w, h), out, vjp)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    av, bv = a.value, b.value
    out = np.einsum(subscripts, av, bv)

    def vjp(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, bv) if set(sa) <= set(out_s + sb) else None
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, av) if set(sb) <= set(out_s + sa) else None
        if ga is None or gb is None:
            raise ContractError(f"einsum {subscripts}: summed-out index private to one operand")
        return ga, gb
    return _record((a, b), out, vjp)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _record((a,), out, lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record((a,), np.swapaxes(a.value, ax1, ax2),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def vectorize(m) -> Tensor:
    """Stack the columns of the trailing [N, d] matrix into a length N*d vector."""
    m = as_tensor(m)
    if m.ndim < 2:
        raise DimensionError(f"vectorize: need a matrix, got shape {m.shape}")
    n, d = m.shape[-2:]
    return reshape(swapaxes(m, -1, -2), m.shape[:-2] + (n * d,))


def matricize(v, n: int, d: int) -> Tensor:
    """Inverse of :func:`vectorize`: trailing length N*d vector to an [N, d] matrix."""
    v = as_tensor(v)
    if v.ndim < 1 or v.shape[-1] != n * d:
        raise DimensionError(f"matricize: length {v.shape[-1:] or 0} is not {n}*{d}")
    return swapaxes(reshape(v, v.shape[:-1] + (d, n)), -1, -2)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(ts, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)
    return _record(ts, out,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def take(a, idx) -> Tensor:
    """Basic or advanced indexing, ``a[idx]``."""
    a = as_tensor(a)
    shape = a.shape
    out = a.value[idx]

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)
    return _record((a,), np.array(out, dtype=DTYPE), vjp)


# ---------------------------------------------------------------- checking

def finite_difference_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                           order: int = 2) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. the array ``x`` (perturbed in place).

    ``order=4`` uses the five-point stencil, whose truncation error is O(step^4).
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)

    def at(i, old, delta):
        flat[i] = old + delta
        return f()

    for i in range(flat.size):
        old = flat[i]
        if order == 2:
            gflat[i] = (at(i, old, step) - at(i, old, -step)) / (2.0 * step)
        else:
            gflat[i] = (8.0 * (at(i, old, step) - at(i, old, -step))
                        - (at(i, old, 2 * step) - at(i, old, -2 * step))) / (12.0 * step)
        flat[i] = old
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maxed."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
