from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union
import math

import numpy as np

from .errors import DimensionError, TapeError

DTYPE = np.float32

_recording: ContextVar[bool] = ContextVar("_recording", default=True)
_precision: ContextVar[type] = ContextVar("_precision", default=DTYPE)

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Build tensors in another float dtype (float64 for gradient checks)."""
    token = _precision.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _precision.reset(token)


def current_dtype() -> type:
    return _precision.get()


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(value: ArrayLike) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    """
    Dense float array (float32 unless built under precision()) that records
    the operations producing it.

    The graph is dynamic: every forward pass builds it anew, and backward()
    walks it once in reverse topological order and then releases it.
    Calling backward() a second time on the same loss raises TapeError.
    """
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_precision.get())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        """Wrap an op output and register it on the graph when needed."""
        needs_grad = _recording.get() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs_grad)
        if needs_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # --------------------------------------------------------------- backward

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise TapeError("graph already consumed by a previous backward(); run the forward pass again")
        if not self.requires_grad:
            raise TapeError("loss does not depend on any tensor that requires grad")

        order = self._topological_order()
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

        # Release the graph so activations can be freed
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._result(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-_as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return _as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._result(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._result(a / b, (self, other), backward)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return _as_tensor(other) / self

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            grad_a = np.matmul(g, np.swapaxes(b, -1, -2))
            grad_b = np.matmul(np.swapaxes(a, -1, -2), g)
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

        return Tensor._result(np.matmul(a, b), (self, other), backward)

    # ----------------------------------------------------------------- shapes

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        axes = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inverse),))

    # ------------------------------------------------------------- reductions

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(g.dtype),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def logsumexp(self, axis: int = -1) -> "Tensor":
        x = self.data
        peak = np.max(x, axis=axis, keepdims=True)
        shifted = np.exp(x - peak)
        total = shifted.sum(axis=axis, keepdims=True)
        out = (peak + np.log(total)).squeeze(axis)
        probs = shifted / total

        def backward(g):
            return (np.expand_dims(g, axis) * probs,)

        return Tensor._result(out, (self,), backward)

    # ------------------------------------------------------------ elementwise

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        z = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def gelu(self) -> "Tensor":
        """GELU, tanh approximation."""
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x ** 2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

        return Tensor._result(out, (self,), backward)

    def softmax(self, axis: int = -1) -> "Tensor":
        """Max-subtracted softmax; -inf entries get probability 0."""
        x = self.data
        shifted = np.exp(x - np.max(x, axis=axis, keepdims=True))
        out = shifted / shifted.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._result(out, (self,), backward)

    def masked_fill(self, mask: np.ndarray, value: float) -> "Tensor":
        """Replace entries where mask is True; those entries receive zero gradient."""
        mask = np.broadcast_to(mask, self.shape)
        keep = (~mask).astype(self.data.dtype)
        out = np.where(mask, self.data.dtype.type(value), self.data)
        return Tensor._result(out, (self,), lambda g: (g * keep,))

    def rms_norm(self, weight: "Tensor", eps: float = 1e-5) -> "Tensor":
        """Normalize the last axis to unit RMS, then scale by weight."""
        x, w = self.data, weight.data
        inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        normed = x * inv

        def backward(g):
            g_normed = g * w
            grad_x = inv * (g_normed - normed * (g_normed * normed).mean(axis=-1, keepdims=True))
            grad_w = (g * normed).reshape(-1, w.shape[-1]).sum(axis=0)
            return grad_x, grad_w

        return Tensor._result(normed * w, (self, weight), backward)

    def l2_normalize(self, axis: int = -1, eps: float = 1e-8) -> "Tensor":
        """x / (||x|| + eps) along axis; a zero vector maps to zero."""
        x = self.data
        norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        denom = norm + eps
        safe_norm = np.where(norm > 0, norm, 1.0)

        def backward(g):
            dot = (g * x).sum(axis=axis, keepdims=True)
            return (g / denom - x * dot / (safe_norm * denom * denom),)

        return Tensor._result(x / denom, (self,), backward)

    # --------------------------------------------------------------- indexing

    def take_rows(self, index: np.ndarray) -> "Tensor":
        """Gather rows of a 2-D tensor: out[...] = self[index[...], :]."""
        index = np.asarray(index, dtype=np.int64)
        table_shape = self.shape

        def backward(g):
            grad = np.zeros(table_shape, dtype=g.dtype)
            np.add.at(grad, index.reshape(-1), g.reshape(-1, table_shape[-1]))
            return (grad,)

        return Tensor._result(self.data[index], (self,), backward)

    def pick(self, columns: np.ndarray) -> "Tensor":
        """Per-row column selection: out[t, j] = self[t, columns[t, j]]."""
        columns = np.asarray(columns, dtype=np.int64)
        rows = np.arange(self.shape[0])[:, None]
        shape = self.shape

        def backward(g):
            grad = np.zeros(shape, dtype=g.dtype)
            np.add.at(grad, (rows, columns), g)
            return (grad,)

        return Tensor._result(self.data[rows, columns], (self,), backward)

    def gather(self, rows: np.ndarray, cols: np.ndarray) -> "Tensor":
        """Element gather from a 2-D tensor: out[i] = self[rows[i], cols[i]]."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        shape = self.shape

        def backward(g):
            grad = np.zeros(shape, dtype=g.dtype)
            np.add.at(grad, (rows, cols), g)
            return (grad,)

        return Tensor._result(self.data[rows, cols], (self,), backward)

    @staticmethod
    def scatter_rows(shape: Tuple[int, int], parts: Sequence[Tuple[np.ndarray, "Tensor"]]) -> "Tensor":
        """Sum row blocks into a zero matrix: out[rows_i] += part_i."""
        out = np.zeros(shape, dtype=_precision.get())
        indices = [np.asarray(rows, dtype=np.int64) for rows, _ in parts]
        for rows, (_, part) in zip(indices, parts):
            np.add.at(out, rows, part.data)

        def backward(g):
            return tuple(g[rows] for rows in indices)

        return Tensor._result(out, [part for _, part in parts], backward)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)
