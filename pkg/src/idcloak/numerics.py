"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the embedding networks, SSIM and the mask
losses are provided. A graph is built on every forward call and thrown away
after ``backward``; nothing is cached between batches.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCCOS_LIMIT = 1.0 - 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is filled by
    :func:`backward` for nodes that require gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, op, parents, backward_fn) -> Tensor:
    # record the backward closure only when some input needs gradients
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, "div", (a, b), bw)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, "sqrt", (x,), lambda g: (g / (2.0 * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def maximum(x, c: float) -> Tensor:
    """max(x, c) against a constant; the gradient goes to x where x > c."""
    x = as_tensor(x)
    mask = x.data > c
    return _node(np.where(mask, x.data, c), "maximum", (x,), lambda g: (g * mask,))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes inside the interval, zero outside."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def quantize_ste(x, levels: int = 255) -> Tensor:
    """Snap to the 1/levels grid (half away from zero); identity in backward."""
    x = as_tensor(x)
    return _node(round_half_away(x.data * levels) / levels, "quantize", (x,), lambda g: (g,))


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def arccos(x) -> Tensor:
    """arccos of the input clamped to [-1+1e-7, 1-1e-7].

    The derivative is taken at the clamped value and passed through, so it
    stays finite (magnitude at most ~2236) even when the raw input sits at +-1.
    """
    x = as_tensor(x)
    c = np.clip(x.data, -ARCCOS_LIMIT, ARCCOS_LIMIT)
    dfdx = -1.0 / np.sqrt(1.0 - c * c)
    return _node(np.arccos(c), "arccos", (x,), lambda g: (g * dfdx,))


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, "sum", (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ShapeError(f"dot: last axes differ for shapes {a.shape} and {b.shape}")
    return sum(mul(a, b), axis=-1)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return ((g - proj * out) / norm,)

    return _node(out, "l2_normalize", (x,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _node(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), bw)


def linmap2d(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows @ X @ cols.T`` to the trailing two axes of x.

    Bilinear resizing and separable window filtering are both of this form.
    """
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if x.data.ndim < 2 or rows.shape[1] != x.shape[-2] or cols.shape[1] != x.shape[-1]:
        raise ShapeError(
            f"linmap2d: maps {rows.shape} x {cols.shape} do not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def bw(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _node(out, "linmap2d", (x,), bw)


def _bilinear_taps(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights for corner-aligned bilinear resampling."""
    if n_in == n_out:
        return np.eye(n_in)
    lo, hi, frac = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        m[i, lo[i]] += 1.0 - frac[i]
        m[i, hi[i]] += frac[i]
    return m


def _lerp_axis(v: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = v.shape[axis]
    if n_in == n_out:
        return v
    lo, hi, frac = _bilinear_taps(n_in, n_out)
    shape = [1] * v.ndim
    shape[axis] = n_out
    a = np.take(v, lo, axis=axis)
    # a + t * (b - a) keeps constant regions exactly constant
    return a + frac.reshape(shape) * (np.take(v, hi, axis=axis) - a)


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Resize the trailing (H, W) axes; same size returns the input node."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    out = _lerp_axis(_lerp_axis(x.data, -2, out_h), -1, out_w)
    rows, cols = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)

    def bw(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return _node(out, "resize", (x,), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: [N, C, H, W], w: [O, C, k, k], b: [O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return gxp, gw

    out_t = _node(out, "conv2d", (x, w), bw)
    if b is not None:
        out_t = add(out_t, reshape(as_tensor(b), (1, -1, 1, 1)))
    return out_t


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _node(loss, "softmax_xent", (logits,), bw)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Iterable[Tensor] = ()) -> list:
    """Propagate d(root)/d(node) to every gradient-requiring node.

    Returns the gradients of ``wrt`` in order; leaves the root never reaches
    get zeros.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    for t in wrt:
        t.grad = np.zeros_like(t.data)
    if not root.requires_grad:
        return [t.grad for t in wrt]
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad:
                parent.grad = parent.grad + g
    return [t.grad for t in wrt]


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|).

    Non-finite comparisons are returned as ``inf``.
    """
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    (analytic,) = backward(f(x), [x])
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(point.shape))).data
        fm = f(Tensor(minus.reshape(point.shape))).data
        numeric.reshape(-1)[i] = (float(fp) - float(fm)) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max()) if err.size else 0.0
