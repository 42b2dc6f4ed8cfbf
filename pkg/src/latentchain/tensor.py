"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and records the operations applied to it.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates ``d scalar / d leaf`` into the
``grad`` array of every tensor created with ``requires_grad=True``.

Training runs in float32; gradient-check oracles build float64 graphs by
passing float64 arrays in. All reductions rely on numpy's fixed evaluation
order, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the ``with`` block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float32)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = _as_array(data)
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents = _parents if _GRAD_ENABLED else ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        needs = _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)
        out = Tensor(data, requires_grad=False, _parents=tuple(parents) if needs else ())
        if needs:
            out.requires_grad = True
            out._backward = backward
        return out

    def backward(self):
        """Accumulate gradients of this scalar with respect to all leaves."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents and node is not self:
                node.grad = None  # free intermediate buffers

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data + b.data

        def backward(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g, a.data.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accumulate(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out_data = a.data * b.data

        def backward(g):
            if a.requires_grad or a._parents:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad or b._parents:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._coerce(other) * self ** -1.0

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise ContractError("tensor exponents are not supported")
        a = self
        out_data = a.data ** exponent

        def backward(g):
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

        return Tensor._result(out_data, (a,), backward)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return Tensor._result(out_data, (a,), backward)

    def log(self):
        a = self
        out_data = np.log(a.data)

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._result(out_data, (a,), backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._result(out_data, (a,), backward)

    def gelu(self):
        """Tanh-approximated GELU."""
        a = self
        c = math.sqrt(2.0 / math.pi)
        x = a.data
        inner = c * (x + 0.044715 * (x * x * x))
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = c * (1.0 + (3 * 0.044715) * (x * x))
            dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * dy.astype(x.dtype, copy=False))

        return Tensor._result(out_data, (a,), backward)

    # -- reductions and shaping ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._result(out_data, (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out_data = a.data.reshape(shape)

        def backward(g):
            a._accumulate(g.reshape(a.data.shape))

        return Tensor._result(out_data, (a,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        out_data = np.transpose(a.data, axes)
        inverse = np.argsort(axes)

        def backward(g):
            a._accumulate(np.transpose(g, inverse))

        return Tensor._result(out_data, (a,), backward)

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        out_data = np.swapaxes(a.data, ax1, ax2)

        def backward(g):
            a._accumulate(np.swapaxes(g, ax1, ax2))

        return Tensor._result(out_data, (a,), backward)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]
        key_tuple = key if isinstance(key, tuple) else (key,)
        advanced = any(isinstance(k, (np.ndarray, list)) for k in key_tuple)

        def backward(g):
            buf = np.zeros_like(a.data)
            if advanced:
                np.add.at(buf, key, g)  # array indices may repeat
            else:
                buf[key] += g
            a._accumulate(buf)

        return Tensor._result(out_data, (a,), backward)

    # -- neural-network primitives --------------------------------------------

    def matmul(self, other: "Tensor"):
        other = self._coerce(other)
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
            )
        out_data = np.matmul(a.data, b.data)

        def backward(g):
            if a.requires_grad or a._parents:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.data.shape))
            if b.requires_grad or b._parents:
                if b.data.ndim == 2 and a.data.ndim > 2:
                    # weight matrix under a batched activation: one flat GEMM
                    k = a.data.shape[-1]
                    n = g.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
                else:
                    gb = _unbroadcast(
                        np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
                b._accumulate(gb)

        return Tensor._result(out_data, (a, b), backward)

    __matmul__ = matmul

    def softmax(self, axis: int = -1, additive_mask: np.ndarray | None = None):
        """Numerically stabilized softmax along ``axis``.

        ``additive_mask`` is a constant bias folded in before normalization;
        it never receives gradients.
        """
        a = self
        logits = a.data if additive_mask is None else a.data + additive_mask
        shifted = logits - logits.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

        return Tensor._result(out_data, (a,), backward)

    def logsumexp(self, axis: int = -1):
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        e = np.exp(a.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out_data = (np.log(s) + m).squeeze(axis)

        def backward(g):
            soft = e / s
            a._accumulate(np.expand_dims(g, axis) * soft)

        return Tensor._result(out_data, (a,), backward)

    def take_along_axis(self, indices: np.ndarray, axis: int = -1):
        """Differentiable gather of one entry per position along ``axis``."""
        a = self
        idx = np.asarray(indices)
        out_data = np.take_along_axis(a.data, idx, axis=axis)

        def backward(g):
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, idx, g, axis=axis)
            a._accumulate(buf)

        return Tensor._result(out_data, (a,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward into the table."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return Tensor._result(out_data, (table,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return Tensor._result(out_data, tuple(parts), backward)


def stack_rows(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [t.reshape(*((1,) * (axis + 1 - t.ndim) + t.shape)) for t in tensors]
    return concat(parts, axis=axis)


def rms_normalize(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Fused y = x * gain / sqrt(mean(x^2, -1) + eps)."""
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    out_data = xd * inv * gain.data

    def backward(g):
        if x.requires_grad or x._parents:
            gg = g * gain.data
            s = (gg * xd).sum(axis=-1, keepdims=True)
            d = xd.shape[-1]
            x._accumulate(gg * inv - xd * (s * inv ** 3 / d))
        if gain.requires_grad or gain._parents:
            gain._accumulate(_unbroadcast(g * xd * inv, gain.data.shape))

    return Tensor._result(out_data, (x, gain), backward)


def unit_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Fused y = x / ||x||_2 along the last axis."""
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    out_data = xd * inv

    def backward(g):
        s = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate((g - out_data * s) * inv)

    return Tensor._result(out_data, (x,), backward)


def rotary_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate per-head vector halves by position-dependent angles.

    ``cos``/``sin`` broadcast against x[..., :half]. The backward pass is the
    inverse rotation (the rotation matrix is orthogonal).
    """
    half = x.data.shape[-1] // 2
    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    out_data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1 = g[..., :half]
        g2 = g[..., half:]
        x._accumulate(np.concatenate(
            [g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1))

    return Tensor._result(out_data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a.matmul(b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss."""
    loss.backward()
