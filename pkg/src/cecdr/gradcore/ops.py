"""Differentiable operations over :class:`~cecdr.gradcore.tensor.Tensor`.

Every op computes its forward value eagerly with numpy and, when a graph is
active and some input requires grads, records a closure that maps the output
gradient to input gradients. Elementwise binary ops follow numpy broadcasting;
the gradient is summed back to each input's shape.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, record

LEAKY_SLOPE = 0.01
LN_EPS = 1e-9


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", (a, b), a.data * b.data, bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def _flat_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[1],))


def matmul(a, b) -> Tensor:
    """``(..., m, n) @ (n, p)`` or batched ``(B, m, n) @ (B, n, p)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    flat = b.ndim == 2
    # a shared 2-D right operand goes through one GEMM over the flattened batch
    out = _flat_matmul(a.data, b.data) if flat else np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _flat_matmul(g, b.data.T) if flat else np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if flat:
                n, p = b.shape
                gb = a.data.reshape(-1, n).T @ g.reshape(-1, p)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return record("matmul", (a, b), out, bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)
    return record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)
    return record("leaky_relu", (a,), y, lambda g: (np.where(pos, g, slope * g),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", (a,), y, bw)


def layer_norm(a, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine terms)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return record("layer_norm", (a,), y, bw)


def dropout(a, keep: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``keep == 1`` is the identity and draws nothing."""
    a = as_tensor(a)
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout: keep probability {keep} outside (0, 1]")
    if keep == 1.0:
        return a
    if rng is None:
        raise ValueError("dropout: an explicit RNG stream is required when keep < 1")
    mask = (rng.random(a.shape) < keep) / keep
    return record("dropout", (a,), a.data * mask, lambda g: (g * mask,))


def gather(table, idx) -> Tensor:
    """Rows of a 2-D ``table`` at integer ``idx``; output shape ``idx.shape + (d,)``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("gather", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        flat = idx.reshape(-1)
        np.add.at(gt, flat, g.reshape(-1, table.shape[1]))
        rows = np.unique(flat)
        if table.touched_rows is None:
            table.touched_rows = rows
        else:
            table.touched_rows = np.union1d(table.touched_rows, rows)
        return (gt,)

    return record("gather", (table,), out, bw)


def max_pool(a, mask=None) -> Tensor:
    """Max over the sequence axis (-2) of ``(..., L, d)``; ``mask`` marks valid rows."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("max_pool", a.shape)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:-1]:
            raise ShapeError("max_pool", a.shape, mask.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("max_pool: a sequence has no valid positions")
        x = np.where(mask[..., None], x, -np.inf)
    arg = np.argmax(x, axis=-2)
    out = np.take_along_axis(a.data, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, arg[..., None, :], g[..., None, :], axis=-2)
        return (ga,)

    return record("max_pool", (a,), out, bw)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record("concat", ts, out, bw)


def stop_gradient(a) -> Tensor:
    """Same values, detached: no gradient ever reaches the input."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


def take(a, key) -> Tensor:
    """Numpy indexing (basic or integer-array) with a scatter-add backward."""
    a = as_tensor(a)
    out = a.data[key]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return record("take", (a,), np.array(out, copy=True), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape)
    return record("transpose", (a,), np.swapaxes(a.data, -1, -2),
                  lambda g: (np.swapaxes(g, -1, -2),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record("sum", (a,), np.asarray(out), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return record("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "log": log,
    "leaky_relu": leaky_relu,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "dropout": dropout,
    "gather": gather,
    "max_pool": max_pool,
    "concat": concat,
    "stop_gradient": stop_gradient,
    "take": take,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum,
    "mean": mean,
    "clip": clip,
}


def forward_op(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch by op name. ``concat`` takes the whole list; the rest unpack it."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)
