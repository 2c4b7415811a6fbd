"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a local
vector-Jacobian closure on the output tensor, stamped with a monotonically
increasing sequence number. ``Tensor.backward`` collects the nodes reachable
from the root and replays them in reverse execution order, which is a valid
reverse topological order. The recorded graph is released afterwards.

Broadcasting is restricted to leading batch axes: a binary operation accepts
operands whose shapes are equal or where one shape is a suffix of the other
(a scalar counts as the empty suffix).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "KinkRecorder",
    "as_tensor",
    "no_grad",
    "concat",
    "stack",
    "where",
    "softmax",
    "log_softmax",
    "softplus",
    "sparsemax",
    "layer_norm",
    "gather",
]

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class KinkRecorder:
    """Collects the discrete branch taken by piecewise ops during a forward pass.

    ``relu``, ``max`` and ``sparsemax`` report their active pattern (sign mask,
    argmax, support) while a recorder is active. Two evaluations with equal
    signatures lie in the same smooth piece of the function.
    """

    _active: list["KinkRecorder"] = []

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self):
        KinkRecorder._active.append(self)
        return self

    def __exit__(self, *exc):
        KinkRecorder._active.remove(self)

    def signature(self) -> tuple[bytes, ...]:
        return tuple(self.patterns)

    @classmethod
    def report(cls, pattern: np.ndarray):
        if cls._active:
            packed = np.ascontiguousarray(pattern).tobytes()
            for rec in cls._active:
                rec.patterns.append(packed)


def _check_broadcast(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


class Tensor:
    """A float64 array plus an optional gradient.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> (x * x).sum().backward()
    >>> x.grad
    array([2., 4., 6.])
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_sequence)
        self.name = name

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs an explicit gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError("backward", self.shape, grad.shape)

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._parents if p.requires_grad and id(p) not in nodes)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        pending = {id(self): grad}
        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = t.grad + g if t.grad is not None else g.copy()
                continue
            t.grad = g
            grads = t._backward(g)
            for p, pg in zip(t._parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg
        for t in order:
            if t._backward is not None:
                t._parents = ()
                t._backward = None

    # -- elementwise arithmetic ---------------------------------------------

    def _binary(self, other, op: str, fwd, bwd):
        other = as_tensor(other)
        _check_broadcast(op, self.shape, other.shape)
        a, b = self, other
        data = fwd(a.data, b.data)

        def backward(g):
            ga, gb = bwd(g, a.data, b.data, data)
            return (
                _unbroadcast(ga, a.shape) if a.requires_grad else None,
                _unbroadcast(gb, b.shape) if b.requires_grad else None,
            )

        return Tensor._result(data, (a, b), backward)

    def __add__(self, other):
        return self._binary(other, "add", np.add, lambda g, a, b, o: (g, g))

    def __radd__(self, other):
        return as_tensor(other).__add__(self)

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract, lambda g, a, b, o: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply, lambda g, a, b, o: (g * b, g * a))

    def __rmul__(self, other):
        return as_tensor(other).__mul__(self)

    def __truediv__(self, other):
        return self._binary(other, "div", np.divide, lambda g, a, b, o: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._result(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    # -- linear algebra and layout ------------------------------------------

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
        data = a.data @ b.data

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return Tensor._result(data, (a, b), backward)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError(f"transpose{axes}", self.shape)
        inverse = np.argsort(axes)
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    @property
    def T(self):
        return self.transpose()

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape to {shape}", src) from None
        return Tensor._result(data, (self,), lambda g: (g.reshape(src),))

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            raise TypeError("index with numpy arrays or slices, not Tensors")
        src = self.shape
        data = self.data[idx]

        def backward(g):
            full = np.zeros(src)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(np.array(data), (self,), backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        src = self.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = -1, keepdims: bool = False):
        """Maximum along one axis; the gradient goes to the first maximiser."""
        axis = axis % self.ndim
        arg = np.argmax(self.data, axis=axis)
        KinkRecorder.report(arg)
        idx = np.expand_dims(arg, axis)
        data = np.take_along_axis(self.data, idx, axis=axis)
        src = self.shape

        def backward(g):
            full = np.zeros(src)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, idx, gg, axis=axis)
            return (full,)

        return Tensor._result(data if keepdims else np.squeeze(data, axis), (self,), backward)

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self):
        mask = self.data > 0
        KinkRecorder.report(mask)
        return Tensor._result(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def sigmoid(self):
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._result(y, (self,), lambda g: (g * y * (1.0 - y),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:axis] + t.shape[axis + 1:] != ref[:axis] + ref[axis + 1:]:
            raise ShapeError(f"concat(axis={axis})", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(t.reshape(t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or np.shape(mask) != a.shape:
        raise ShapeError("where", np.shape(mask), a.shape, b.shape)
    mask = np.asarray(mask, dtype=bool)
    return Tensor._result(
        np.where(mask, a.data, b.data), (a, b), lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g))
    )


def gather(x: Tensor, index: np.ndarray, axis: int = 1) -> Tensor:
    """``out[..., m, ...] = x[..., index[m], ...]`` along ``axis``.

    ``x`` is viewed as ``(lead, rows, trail)`` around ``axis``; the backward
    pass is a scatter-add through :func:`relconv.kernels.scatter_add`.
    """
    index = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    n_rows = x.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"gather index out of range for axis of length {n_rows}")
    lead = int(np.prod(x.shape[:axis], dtype=np.int64))
    trail = int(np.prod(x.shape[axis + 1:], dtype=np.int64))
    flat_idx = index.ravel()
    data = np.take(x.data, flat_idx, axis=axis)
    out_shape = x.shape[:axis] + index.shape + x.shape[axis + 1:]
    src = x.shape

    def backward(g):
        g3 = g.reshape(lead, flat_idx.size, trail)
        return (kernels.scatter_add(g3, flat_idx, n_rows).reshape(src),)

    return Tensor._result(data.reshape(out_shape), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("log_softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    v = x.data
    y = np.where(v > 0, v + np.log1p(np.exp(-np.abs(v))), np.log1p(np.exp(np.minimum(v, 0.0))))
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return Tensor._result(y, (x,), lambda g: (g * sig,))


def sparsemax(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean projection onto the probability simplex along ``axis``."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError("sparsemax needs a non-empty axis")
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("sparsemax received non-finite input")
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape[:-1]
    p2 = kernels.sparsemax_rows(moved.reshape(-1, moved.shape[-1]))
    KinkRecorder.report(p2 > 0)
    y = np.moveaxis(p2.reshape(moved.shape), -1, axis)

    def backward(g):
        g2 = np.moveaxis(g, axis, -1).reshape(p2.shape)
        return (np.moveaxis(kernels.sparsemax_backward_rows(p2, g2).reshape(lead + (p2.shape[1],)), -1, axis),)

    return Tensor._result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, shift: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Standardise the last axis (``eps`` inside the square root), then affine."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        d = g.shape[-1]
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d),)

    out = Tensor._result(xhat, (x,), backward)
    if gain is not None:
        out = out * gain
    if shift is not None:
        out = out + shift
    return out
