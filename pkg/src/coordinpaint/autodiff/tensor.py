"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor. ``Tensor.backward`` walks the recorded graph in reverse
topological order, accumulating gradients into leaves that require them.

Broadcasting is deliberately limited to equal shapes and scalar (size-1)
operands so every backward rule stays easy to audit.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating-point precision.

    64-bit mode exists for gradient checking; training runs in 32-bit.
    """
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class GraphConsumedError(RuntimeError):
    """Raised when backward is invoked twice on the same recorded graph."""


class Tensor:
    """N-dimensional float array that participates in autodiff.

    Image-like data uses the N, C, H, W layout. The value array is read-only
    once wrapped; only ``grad`` changes after creation.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else _DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[BackwardFn] = None
        self._consumed = False
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor into every reachable leaf.

        Args:
            grad: seed gradient; may be omitted for single-element outputs.

        Raises:
            GraphConsumedError: if any node of the graph was already
                backpropagated through.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            seed = np.ones(self.shape, dtype=self.dtype)
        else:
            seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=self.dtype)
            if seed.shape != self.shape:
                raise ValueError(f"seed gradient shape {seed.shape} != output shape {self.shape}")

        order = _topological_order(self)
        for node in order:
            if node._consumed:
                raise GraphConsumedError("backward called twice on the same graph; re-run the forward pass")

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node._consumed = True
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # drop the closure so saved activations can be freed
            node._backward = _consumed_backward

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)


def _consumed_backward(grad):
    raise GraphConsumedError("backward called twice on the same graph; re-run the forward pass")


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape}: only equal shapes or scalars broadcast")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(t.shape)


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    return b.shape if a.size == 1 else a.shape


def _scalar_view(t: Tensor, other: Tensor) -> np.ndarray:
    # size-1 operands broadcast as true scalars so (1,)*(N,C,H,W) keeps the larger shape
    if t.size == 1 and t.shape != other.shape:
        return t.data.reshape(())
    return t.data


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = _scalar_view(a, b) + _scalar_view(b, a)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return Tensor._from_op(np.asarray(out).reshape(_out_shape(a, b)), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = _scalar_view(a, b) - _scalar_view(b, a)

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return Tensor._from_op(np.asarray(out).reshape(_out_shape(a, b)), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    av, bv = _scalar_view(a, b), _scalar_view(b, a)
    out = av * bv

    def backward(g):
        ga = _reduce_to(g * bv, a) if a.requires_grad else None
        gb = _reduce_to(g * av, b) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(np.asarray(out).reshape(_out_shape(a, b)), (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    av, bv = _scalar_view(a, b), _scalar_view(b, a)
    out = av / bv

    def backward(g):
        ga = _reduce_to(g / bv, a) if a.requires_grad else None
        gb = _reduce_to(-g * av / (bv * bv), b) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(np.asarray(out).reshape(_out_shape(a, b)), (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return Tensor._from_op(x.data * factor, (x,), backward)


def add_scalar(x: Tensor, value: float) -> Tensor:
    def backward(g):
        return (g,)

    return Tensor._from_op(x.data + x.dtype.type(value), (x,), backward)


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._from_op(np.abs(x.data), (x,), backward)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return Tensor._from_op(s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1 - t * t),)

    return Tensor._from_op(t, (x,), backward)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    alpha = x.dtype.type(alpha)
    slope = np.where(x.data > 0, x.dtype.type(1), alpha)

    def backward(g):
        return (g * slope,)

    return Tensor._from_op(x.data * slope, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    alpha = x.dtype.type(alpha)
    neg = np.minimum(x.data, 0)
    em1 = np.expm1(neg)
    out = np.where(x.data > 0, x.data, alpha * em1)

    def backward(g):
        return (g * np.where(x.data > 0, 1, alpha * (em1 + 1)).astype(x.dtype),)

    return Tensor._from_op(out.astype(x.dtype), (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    v = x.data
    out = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))
    s = _stable_sigmoid(v)

    def backward(g):
        return (g * s,)

    return Tensor._from_op(out.astype(x.dtype), (x,), backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (g * 2 * x.data,)

    return Tensor._from_op(x.data * x.data, (x,), backward)


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch a pointwise op by name (add, mul, sub, sigmoid, tanh, ...)."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "div": div,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "leaky_relu": leaky_relu,
        "relu": relu,
        "elu": elu,
        "abs": absolute,
        "scale": scale,
        "softplus": softplus,
        "square": square,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# -- reductions & shape ops -------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype).reshape(()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.dtype).reshape(()), (x,), backward)


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or base[0] != t.shape[0] or base[2:] != t.shape[2:]:
            raise ValueError(f"cannot concatenate {base} with {t.shape}: N, H, W must match")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along any axis; all other extents must match."""
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for d, (a, b) in enumerate(zip(ref, t.shape)) if d != axis % len(ref)):
            raise ValueError(f"cannot concatenate {ref} with {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[:, start:stop].copy(), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return Tensor._from_op(x.data.reshape(shape).copy(), (x,), backward)


def gram(x: Tensor) -> Tensor:
    """Per-sample channel Gram matrix F Fᵀ / (C·H·W) of an NCHW tensor."""
    n, c, h, w = x.shape
    f = x.data.reshape(n, c, h * w)
    norm = x.dtype.type(c * h * w)
    out = np.matmul(f, f.transpose(0, 2, 1)) / norm

    def backward(g):
        sym = g + g.transpose(0, 2, 1)
        return ((np.matmul(sym, f) / norm).reshape(x.shape),)

    return Tensor._from_op(out, (x,), backward)
