"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Every op builds a node holding its output, its parents, and a vector-Jacobian
closure.  ``Tensor.backward`` walks the recorded nodes once in reverse
topological order.  The engine is deliberately minimal: it supports exactly
the primitives the desk-scale models need (matmul, linear, conv2d with
stride 1 and zero padding, relu, add, mul, mean-pool, gather, and softmax
cross-entropy).
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes do not fit the op; the message names the op."""


class GraphStateError(RuntimeError):
    """Graph used out of order (e.g. backward before forward)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @classmethod
    def _node(cls, data, parents: Sequence["Tensor"], vjp: Callable, op: str):
        out = cls(data, op=op)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def sum(self) -> "Tensor":
        return total(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad=None) -> list:
        """Accumulate gradients into every reachable ``requires_grad`` tensor.

        ``grad`` is the upstream gradient of this tensor (defaults to 1 for a
        scalar).  Returns the nodes in the order they were visited.
        """
        if grad is None:
            if self.size != 1:
                raise GraphStateError("backward() on a non-scalar needs an explicit grad")
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=DTYPE), self.shape).copy()

        order = _topological(self)
        for node in order:
            node.grad = None
        self.grad = grad
        visited = []
        for node in reversed(order):
            visited.append(node)
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    parent.grad += g
        return visited


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor._node(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor._node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        if b.data.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._node(out, (a, b), vjp, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out as (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor._node(out, parents, vjp, "linear")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor._node(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return Tensor._node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def total(x: Tensor) -> Tensor:
    return Tensor._node(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum"
    )


def gather(values: Tensor, index: np.ndarray) -> Tensor:
    """``values[index]`` for an integer index array of any shape.

    The VJP scatter-adds into ``values``; this is how per-block scalars are
    broadcast onto weight elements.
    """
    index = np.asarray(index)
    if values.data.ndim != 1:
        raise ShapeError(f"gather: values must be 1-D, got {values.shape}")
    if index.size and (index.min() < 0 or index.max() >= values.size):
        raise ShapeError(f"gather: index out of range for {values.size} values")
    flat = index.ravel()

    def vjp(g):
        return (np.bincount(flat, weights=g.ravel(), minlength=values.size),)

    return Tensor._node(values.data[index], (values,), vjp, "gather")


def _im2col(x: np.ndarray, kh: int, kw: int, padding: int) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    n, c, oh, ow = win.shape[:4]
    # (N, OH, OW, C, kh, kw) -> rows per output position
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride 1, symmetric zero padding.

    x: (N, C, H, W); weight: (O, C, kh, kw); result (N, O, OH, OW).
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {wc}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    cols, oh, ow = _im2col(x.data, kh, kw, padding)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out = out + bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = [x, weight] + ([bias] if bias is not None else [])

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
        gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gpad[:, :, i : i + oh, j : j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gpad[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    return Tensor._node(out, parents, vjp, "conv2d")


def mean_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling."""
    if x.data.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
        raise ShapeError(f"mean_pool2d: {x.shape} not divisible by pool size {size}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return Tensor._node(out, (x,), vjp, "mean_pool2d")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}"
        )
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Tensor._node(np.asarray(loss), (logits,), vjp, "softmax_cross_entropy")


def custom(x: Tensor, value: np.ndarray, vjp: Callable, op: str) -> Tensor:
    """Wrap an externally computed unary op with its own VJP."""
    return Tensor._node(value, (x,), lambda g: (vjp(g),), op)


class Graph:
    """One forward/backward evaluation over a named set of parameters.

    >>> w = Tensor([[1.0, 0.0], [0.0, 1.0]], requires_grad=True)
    >>> g = Graph({"w": w})
    >>> y = g.forward(lambda p, x: (p["w"] @ x).sum(), Tensor([3.0, 4.0]))
    >>> float(y.data)
    7.0
    """

    def __init__(self, params: Mapping[str, Tensor]):
        self.params = dict(params)
        self.output: Optional[Tensor] = None
        self.visited: list = []

    def forward(self, fn: Callable, *inputs) -> Tensor:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise FloatingPointError(f"parameter {name!r} has non-finite values")
        out = fn(self.params, *inputs)
        if out.size != 1:
            raise ShapeError(f"forward: loss must be scalar, got shape {out.shape}")
        self.output = out
        return out

    def backward(self, upstream: float = 1.0) -> dict:
        if self.output is None:
            raise GraphStateError("backward() called before forward()")
        for p in self.params.values():
            p.grad = None
        self.visited = self.output.backward(np.full(self.output.shape, upstream))
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        return grads


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: dict,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    names: Optional[Iterable[str]] = None,
) -> Mapping[str, np.ndarray]:
    """One SGD-with-momentum update, in place.

    ``v <- momentum * v + grad + weight_decay * p`` then ``p <- p - lr * v``.
    Missing entries in ``velocity`` start at zero.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
    for name in list(names) if names is not None else list(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient for {name!r} ({bad} entries)")
        p = params[name]
        v = velocity.get(name)
        step = g + weight_decay * p if weight_decay else np.array(g, dtype=DTYPE)
        v = step if v is None else momentum * v + step
        velocity[name] = v
        p -= lr * v
    return params


class SGD:
    """Stateful wrapper around :func:`sgd_step`."""

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict = {}

    def step(self, params, grads, names=None):
        return sgd_step(
            params, grads, self.velocity, self.lr, self.momentum, self.weight_decay, names
        )
