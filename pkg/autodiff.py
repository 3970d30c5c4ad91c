"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each ``Tensor`` remembers its parents and a closure mapping the upstream
gradient to one gradient per parent. ``backward`` walks the graph in reverse
topological order. The gated recurrent layer is a single fused operation
whose backward pass is written out by hand.
"""
import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp

logger = logging.getLogger(__name__)

ArrayLike = Union['Tensor', np.ndarray, float, int]


class Tensor:
    """An array node in the computation graph"""

    __slots__ = ('data', 'grad', 'parents', 'backward_fn', 'requires_grad', 'name')

    def __init__(self, data, parents: Tuple['Tensor', ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 requires_grad: bool = False, name: str = ''):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.shape})"

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient"""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if not node.parents:
                node.grad = node_grad if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node.parents, node.backward_fn(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        return getitem(self, index)


def _topological_order(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: np.ndarray, name: str = '') -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b),
                  lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return Tensor(np.matmul(a.data, b.data), (a, b), backward)


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis), (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        grad = np.zeros_like(a.data)
        grad[index] += g
        return (grad,)

    return Tensor(a.data[index], (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def elu(a: Tensor) -> Tensor:
    positive = a.data > 0
    out = np.where(positive, a.data, np.expm1(np.minimum(a.data, 0)))
    return Tensor(out, (a,), lambda g: (g * np.where(positive, 1.0, out + 1.0),))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    out = -np.logaddexp(0.0, -a.data)
    return Tensor(out, (a,), lambda g: (g * expit(-a.data),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = a.data - logsumexp(a.data, axis=axis, keepdims=True)
    softmax = np.exp(out)

    def backward(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); no gradient flows where the floor is active"""
    keep = a.data >= floor
    return Tensor(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def _elu_grad(pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, 1.0, out + 1.0)


def gru_sequence(inputs: Tensor, recurrent: Tensor, reverse: bool = False) -> Tensor:
    """Gated recurrent layer over time.

    ``inputs`` holds the input projections (batch, time, 3H) in reset,
    update, candidate order; ``recurrent`` is (H, 3H). The candidate uses an
    exponential-linear activation. Returns hidden states (batch, time, H).
    """
    x, w = inputs.data, recurrent.data
    batch, steps, width = x.shape
    hidden = width // 3
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    out = np.zeros((batch, steps, hidden))
    cache = []
    h = np.zeros((batch, hidden))
    for t in order:
        projected = h @ w
        r = expit(x[:, t, :hidden] + projected[:, :hidden])
        z = expit(x[:, t, hidden:2 * hidden] + projected[:, hidden:2 * hidden])
        pre = x[:, t, 2 * hidden:] + r * projected[:, 2 * hidden:]
        n = np.where(pre > 0, pre, np.expm1(np.minimum(pre, 0)))
        h_next = (1 - z) * n + z * h
        cache.append((t, h, projected, r, z, pre, n))
        out[:, t] = h_next
        h = h_next

    def backward(g):
        grad_x = np.zeros_like(x)
        grad_w = np.zeros_like(w)
        carry = np.zeros((batch, hidden))
        for t, h_prev, projected, r, z, pre, n in reversed(cache):
            dh = g[:, t] + carry
            dn = dh * (1 - z)
            dz = dh * (h_prev - n)
            dpre = dn * _elu_grad(pre, n)
            dr = dpre * projected[:, 2 * hidden:]
            d_reset = dr * r * (1 - r)
            d_update = dz * z * (1 - z)
            d_projected = np.concatenate([d_reset, d_update, dpre * r], axis=1)
            grad_x[:, t] = np.concatenate([d_reset, d_update, dpre], axis=1)
            grad_w += h_prev.T @ d_projected
            carry = dh * z + d_projected @ w.T
        return grad_x, grad_w

    return Tensor(out, (inputs, recurrent), backward)
