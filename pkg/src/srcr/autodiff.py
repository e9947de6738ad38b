"""Dense 2-D tensors with reverse-mode gradient accumulation.

Every ``Tensor`` wraps a float64 ``numpy`` matrix.  Operations on tensors that
require gradients record their parents and a local backward rule; calling
``backward`` on a 1x1 result walks the recorded graph in reverse topological
order and accumulates ``grad`` on every reachable tensor.

Broadcasting is limited to the 2-D cases the models need: an operand of shape
``(1, c)``, ``(r, 1)`` or ``(1, 1)`` may be combined with an ``(r, c)`` operand.
"""

import contextlib

import numpy as np

from .errors import ContractError, DomainError, ShapeError


def _as_matrix(data):
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got array with shape {arr.shape}")
    return arr


def _broadcast_shape(a, b, op):
    (ra, ca), (rb, cb) = a, b
    if ra != rb and 1 not in (ra, rb) or ca != cb and 1 not in (ca, cb):
        raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b}")
    return max(ra, rb), max(ca, cb)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A 2-D float64 matrix that optionally tracks gradients."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _op=""):
        self.data = _as_matrix(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph plumbing -------------------------------------------------

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @staticmethod
    def _make(data, parents, op, backward):
        if not _grad_enabled:
            return Tensor(data)
        tracked = tuple(p for p in parents if p.requires_grad)
        out = Tensor(data, requires_grad=bool(tracked), _parents=tracked, _op=op)
        if tracked:
            out._backward = backward
        return out

    def backward(self):
        """Populate ``grad`` on every tracked tensor reachable from this scalar."""
        if self.shape != (1, 1):
            raise ContractError(f"backward() needs a scalar (1x1) loss, got {self.shape}")
        if not self.requires_grad:
            return
        order = topological_order(self)
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- binary arithmetic ----------------------------------------------

    def _binary(self, other, op):
        other = other if isinstance(other, Tensor) else Tensor(other)
        _broadcast_shape(self.shape, other.shape, op)
        return other

    def __add__(self, other):
        other = self._binary(other, "add")
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._binary(other, "sub")
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), "sub", backward)

    def __rsub__(self, other):
        return Tensor(other) - self

    def __mul__(self, other):
        if np.isscalar(other):
            return self.scale(other)
        other = self._binary(other, "mul")
        a, b = self, other

        def backward(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scale(-1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ops ------------------------------------------------------

    def scale(self, factor):
        factor = float(factor)
        a = self

        def backward(g):
            a._accumulate(g * factor)

        return Tensor._make(a.data * factor, (a,), "scale", backward)

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            a._accumulate(g * mask)

        return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", backward)

    def exp(self):
        a = self
        out = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out)

        return Tensor._make(out, (a,), "exp", backward)

    def log(self):
        a = self
        if np.any(a.data <= 0):
            raise DomainError("log of non-positive entry")

        def backward(g):
            a._accumulate(g / a.data)

        return Tensor._make(np.log(a.data), (a,), "log", backward)

    def softmax_rows(self):
        a = self
        shifted = a.data - a.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            inner = (g * out).sum(axis=1, keepdims=True)
            a._accumulate(out * (g - inner))

        return Tensor._make(out, (a,), "softmax_rows", backward)

    def l2norm_rows(self):
        """Per-row Euclidean norm as an ``(r, 1)`` column.

        The subgradient at a zero row is taken to be zero.
        """
        a = self
        norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
        safe = np.where(norms > 0, norms, 1.0)

        def backward(g):
            a._accumulate(np.where(norms > 0, g * a.data / safe, 0.0))

        return Tensor._make(norms, (a,), "l2norm_rows", backward)

    def sum(self):
        a = self

        def backward(g):
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(keepdims=True), (a,), "sum", backward)

    def mean(self):
        return self.sum().scale(1.0 / self.data.size)

    def sum_rows(self):
        """Row sums as an ``(r, 1)`` column."""
        a = self

        def backward(g):
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=1, keepdims=True), (a,), "sum_rows", backward)

    @property
    def T(self):
        a = self

        def backward(g):
            a._accumulate(g.T)

        return Tensor._make(a.data.T.copy(), (a,), "transpose", backward)


def matmul(a, b):
    """Matrix product; ``b`` may be a plain array."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), "matmul", backward)


def stack_mean(tensors):
    """Elementwise mean of equally shaped tensors."""
    if not tensors:
        raise ContractError("mean of an empty tensor list")
    total = tensors[0]
    for t in tensors[1:]:
        if t.shape != total.shape:
            raise ShapeError(f"mean: shapes {total.shape} and {t.shape} differ")
        total = total + t
    return total.scale(1.0 / len(tensors))


def topological_order(root):
    """Tracked tensors reachable from ``root``; each appears after its parents."""
    order, seen = [], set()
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


class SGD:
    """Plain stochastic gradient descent, no momentum."""

    def __init__(self, parameters, lr):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.parameters = list(parameters)
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.parameters:
            p.grad = None

    def step(self):
        missing = [i for i, p in enumerate(self.parameters) if p.grad is None]
        if missing:
            raise ContractError(f"parameters {missing} have no gradient; call backward() first")
        for p in self.parameters:
            p.data -= self.lr * p.grad
            p.grad = np.zeros_like(p.data)
