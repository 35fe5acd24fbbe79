"""Dense tensors with reverse-mode automatic differentiation.

The value type is a row-major float array of up to five axes, canonically
(batch, channels, time, height, width) for video feature maps, with
lower-rank views used for pooled features, logits and losses.  Gradients
are propagated by recording a backward closure per produced tensor and
replaying the recorded graph in reverse topological order.

Values are float32 by default.  Every reduction accumulates in float64
before casting back, which keeps channel means well conditioned when the
channel count is large.  A float64 mode (pass ``dtype=np.float64`` at the
leaves) is available for verification; all operations preserve the dtype
of their inputs.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if any(s < 1 for s in arr.shape):
        raise ShapeError(f"all axis sizes must be >= 1, got shape {arr.shape}")
    return arr


class Tensor:
    """A dense array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False,
                 dtype=np.float32, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple = ()
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{nm})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Propagate gradients from a scalar loss to every reachable leaf.

        Each recorded node's backward rule runs exactly once, in reverse
        topological order, so shared subexpressions accumulate correctly.
        The recorded graph is consumed as it is replayed: intermediate
        gradients and backward closures are released immediately after
        use, so only leaf tensors keep their gradients.
        """
        if self.data.shape != ():
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}")
        order = _toposort(self)
        self._accumulate(np.ones((), dtype=self.data.dtype))
        for node in reversed(order):
            rule = node._backward
            if rule is not None:
                rule()
                node._backward = None
                node._parents = ()
                node.grad = None


def _toposort(root: Tensor) -> list:
    """Iterative post-order over the recorded graph (children before parents)."""
    order, seen, stack = [], set(), [(root, False)]
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


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward=None) -> Tensor:
    """Wrap a raw result; the backward closure is kept only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    if backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        out._parents = tuple(parents)
    else:
        out.requires_grad = False
        out._backward = None
        out._parents = ()
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out = _make(a.data + b.data, (a, b), backward)
    out_holder["out"] = out
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out = _make(a.data * b.data, (a, b), backward)
    out_holder["out"] = out
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out_holder = {}

    def backward():
        if a.requires_grad:
            a._accumulate(out_holder["out"].grad * s)

    out = _make(a.data * s, (a,), backward)
    out_holder["out"] = out
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out = _make(a.data @ b.data, (a, b), backward)
    out_holder["out"] = out
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a (C,) bias to every row of a (N, C) matrix."""
    if x.data.ndim != 2 or bias.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_bias: {x.data.shape} with bias {bias.data.shape}")
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0, dtype=np.float64).astype(bias.data.dtype))

    out = _make(x.data + bias.data[None, :], (x, bias), backward)
    out_holder["out"] = out
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_holder = {}

    def backward():
        if a.requires_grad:
            a._accumulate(out_holder["out"].grad * mask)

    out = _make(a.data * mask, (a,), backward)
    out_holder["out"] = out
    return out


def transpose_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_holder = {}

    def backward():
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(out_holder["out"].grad.transpose(inverse)))

    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)
    out_holder["out"] = out
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out_holder = {}

    def backward():
        if a.requires_grad:
            a._accumulate(out_holder["out"].grad.reshape(a.data.shape))

    out = _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)
    out_holder["out"] = out
    return out


# ---------------------------------------------------------------------------
# axis permutation between video and temporal layouts
# ---------------------------------------------------------------------------

def permute_to_temporal(v: Tensor) -> Tensor:
    """Reorder (B, C, T, H, W) into (B*H*W, C, T).

    Element (b, c, t, h, w) of the input lands at ((b*H + h)*W + w, c, t).
    The permutation materializes a contiguous copy and round-trips
    bit-exactly through :func:`permute_from_temporal`.
    """
    if v.data.ndim != 5:
        raise ShapeError(f"permute_to_temporal expects rank 5, got {v.data.shape}")
    b, c, t, h, w = v.data.shape
    out_holder = {}

    def backward():
        if v.requires_grad:
            g = out_holder["out"].grad.reshape(b, h, w, c, t)
            v._accumulate(np.ascontiguousarray(g.transpose(0, 3, 4, 1, 2)))

    moved = np.ascontiguousarray(v.data.transpose(0, 3, 4, 1, 2)).reshape(b * h * w, c, t)
    out = _make(moved, (v,), backward)
    out_holder["out"] = out
    return out


def permute_from_temporal(x: Tensor, batch: int, height: int, width: int) -> Tensor:
    """Inverse of :func:`permute_to_temporal` for known (B, H, W)."""
    if x.data.ndim != 3:
        raise ShapeError(f"permute_from_temporal expects rank 3, got {x.data.shape}")
    n, c, t = x.data.shape
    if n != batch * height * width:
        raise ShapeError(f"leading axis {n} != {batch}*{height}*{width}")
    out_holder = {}

    def backward():
        if x.requires_grad:
            g = out_holder["out"].grad.transpose(0, 3, 4, 1, 2)
            x._accumulate(np.ascontiguousarray(g).reshape(n, c, t))

    video = x.data.reshape(batch, height, width, c, t).transpose(0, 3, 4, 1, 2)
    out = _make(np.ascontiguousarray(video), (x,), backward)
    out_holder["out"] = out
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean_over_channels(v: Tensor) -> Tensor:
    """Average a (N, C, T) tensor over its channel axis, yielding (N, T)."""
    if v.data.ndim != 3:
        raise ShapeError(f"mean_over_channels expects rank 3, got {v.data.shape}")
    n, c, t = v.data.shape
    out_holder = {}

    def backward():
        if v.requires_grad:
            g = out_holder["out"].grad / v.data.dtype.type(c)
            v._accumulate(np.repeat(g[:, None, :], c, axis=1))

    mean = (v.data.sum(axis=1, dtype=np.float64) / c).astype(v.data.dtype)
    out = _make(mean, (v,), backward)
    out_holder["out"] = out
    return out


def global_avg_pool_3d(v: Tensor) -> Tensor:
    """Average a (B, C, T, H, W) tensor over (T, H, W), yielding (B, C)."""
    if v.data.ndim != 5:
        raise ShapeError(f"global_avg_pool_3d expects rank 5, got {v.data.shape}")
    b, c, t, h, w = v.data.shape
    n = t * h * w
    out_holder = {}

    def backward():
        if v.requires_grad:
            g = out_holder["out"].grad / v.data.dtype.type(n)
            v._accumulate(np.broadcast_to(g[:, :, None, None, None], v.data.shape).copy())

    pooled = (v.data.sum(axis=(2, 3, 4), dtype=np.float64) / n).astype(v.data.dtype)
    out = _make(pooled, (v,), backward)
    out_holder["out"] = out
    return out


def spatial_avg_pool(v: Tensor) -> Tensor:
    """Average a (B, C, T, H, W) tensor over (H, W), yielding (B, C, T)."""
    if v.data.ndim != 5:
        raise ShapeError(f"spatial_avg_pool expects rank 5, got {v.data.shape}")
    b, c, t, h, w = v.data.shape
    n = h * w
    out_holder = {}

    def backward():
        if v.requires_grad:
            g = out_holder["out"].grad / v.data.dtype.type(n)
            v._accumulate(np.broadcast_to(g[:, :, :, None, None], v.data.shape).copy())

    pooled = (v.data.sum(axis=(3, 4), dtype=np.float64) / n).astype(v.data.dtype)
    out = _make(pooled, (v,), backward)
    out_holder["out"] = out
    return out


def mean_axis(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis, float64 accumulation, axis removed."""
    n = a.data.shape[axis]
    out_holder = {}

    def backward():
        if a.requires_grad:
            g = np.expand_dims(out_holder["out"].grad / a.data.dtype.type(n), axis)
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    mean = (a.data.sum(axis=axis, dtype=np.float64) / n).astype(a.data.dtype)
    out = _make(mean, (a,), backward)
    out_holder["out"] = out
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out_holder = {}

    def backward():
        if a.requires_grad:
            g = out_holder["out"].grad
            a._accumulate(np.full(a.data.shape, g, dtype=a.data.dtype))

    total = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    out = _make(total, (a,), backward)
    out_holder["out"] = out
    return out


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross entropy of (B, K) logits against integer labels (B,)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects rank 2, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.data.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range [0, {k})")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    picked = probs[np.arange(b), labels]
    loss_val = np.asarray(-np.log(picked).mean(), dtype=logits.data.dtype)
    out_holder = {}

    def backward():
        if logits.requires_grad:
            g = probs.copy()
            g[np.arange(b), labels] -= 1.0
            g *= float(out_holder["out"].grad) / b
            logits._accumulate(g.astype(logits.data.dtype))

    out = _make(loss_val, (logits,), backward)
    out_holder["out"] = out
    return out
