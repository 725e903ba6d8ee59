"""Tape-free reverse-mode autodiff over float64 numpy arrays.

Every op returns a :class:`Node` holding its value and a vector-Jacobian
product closure. :func:`backward` walks the graph once in reverse
topological order and accumulates gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from zoaeds.errors import ShapeError


class Node:
    __slots__ = ("value", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _topo_order(root: Node) -> list[Node]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, grad=None) -> dict[int, np.ndarray]:
    """Return ``{id(node): d(root . grad)/d node}`` for every reachable node."""
    if grad is None:
        grad = np.ones_like(root.value)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != root.value.shape:
        raise ShapeError(f"backward: output_grad shape {grad.shape} != output shape {root.value.shape}")
    grads = {id(root): grad}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# -- elementwise ------------------------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    return Node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc
    return Node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    return Node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(x.value * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Node) -> Node:
    # split by sign so exp never overflows
    v = x.value
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return Node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Node) -> Node:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# -- reductions -------------------------------------------------------------

def total(x: Node) -> Node:
    return Node(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Node) -> Node:
    n = x.value.size
    return Node(np.asarray(x.value.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean")


# -- layers -----------------------------------------------------------------

def dense(x: Node, w: Node, b: Node) -> Node:
    """``y = x W^T + b`` with ``W`` of shape (out, in); ``x`` is (batch, in)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape} are incompatible")
    out = x.value @ w.value.T + b.value

    def vjp(g):
        return g @ w.value, g.T @ x.value, g.sum(axis=0)

    return Node(out, (x, w, b), vjp, "dense")


def _patches(x, k, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (N, C, H', W', k, k)
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d(x: Node, w: Node, b: Node, padding: int | None = None) -> Node:
    """Stride-1 2-D cross-correlation with zero padding.

    ``x`` is (N, C, H, W), ``w`` is (O, C, k, k). Default padding keeps the
    spatial size for odd kernels.
    """
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} are incompatible")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {w.shape[0]} output channels")
    k = w.shape[2]
    pad = k // 2 if padding is None else padding
    if not 0 <= pad <= k - 1:
        raise ShapeError(f"conv2d: padding {pad} outside [0, {k - 1}]")
    cols = _patches(x.value, k, pad)
    out = np.tensordot(cols, w.value, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', O)
    out = out.transpose(0, 3, 1, 2) + b.value[None, :, None, None]

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
        wf = w.value[:, :, ::-1, ::-1]
        gcols = _patches(g, k, k - 1 - pad)
        gx = np.tensordot(gcols, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Node(out, (x, w, b), vjp, "conv2d")


# -- probabilistic heads ----------------------------------------------------

def softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x: Node) -> Node:
    p = softmax_array(x.value)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Node(p, (x,), vjp, "softmax")


def cross_entropy(logits: Node, target) -> Node:
    """Per-row cross-entropy.

    ``target`` is either integer labels of shape (N,) (hard) or a float
    probability array shaped like ``logits`` (soft).
    """
    target = np.asarray(target)
    logp = log_softmax_array(logits.value)
    if target.ndim == logits.value.ndim - 1 and np.issubdtype(target.dtype, np.integer):
        onehot = np.zeros_like(logp)
        np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    elif target.shape == logits.shape:
        onehot = target.astype(np.float64)
    else:
        raise ShapeError(f"cross_entropy: target {target.shape} does not fit logits {logits.shape}")
    out = -(onehot * logp).sum(axis=-1)
    p = np.exp(logp)

    def vjp(g):
        return (g[..., None] * (p * onehot.sum(axis=-1, keepdims=True) - onehot),)

    return Node(out, (logits,), vjp, "cross_entropy")


def squared_error(pred: Node, target) -> Node:
    """Per-row sum of squared differences; rows are the leading axis."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"squared_error: shapes {pred.shape} and {target.shape} differ")
    diff = pred.value - target
    axes = tuple(range(1, diff.ndim))
    return Node((diff**2).sum(axis=axes), (pred,), lambda g: (2.0 * diff * g.reshape(g.shape + (1,) * len(axes)),), "sse")


def mse(pred: Node, target) -> Node:
    """Per-row mean squared error."""
    sse = squared_error(pred, target)
    n = int(np.prod(pred.shape[1:])) if pred.value.ndim > 1 else 1
    return Node(sse.value / n, (sse,), lambda g: (g / n,), "mse")
