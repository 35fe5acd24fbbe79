"""The temporal operator family: local convolution, fully connected
temporal maps, their shared/reordered/normalized simplifications, and the
residual depthwise temporal convolution.

All operators act on (B, C, T, H, W) video tensors, keep the temporal
length unchanged (stride 1, symmetric zero padding where a window applies)
and are differentiable through :mod:`tfckit.tensor`.

The fully connected variants bind a fixed temporal length at kernel
construction and reject inputs of any other length: a T by T mixing matrix
has no meaning on a different number of frames.

Each forward pass can be instrumented: inside a :func:`count_muls` block
the operators record how many kernel multiplies their definition performs
for the given shapes, which the cost model cross-checks against its closed
forms.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, _make


class TemporalLengthError(ValueError):
    """Raised when an input's temporal length differs from a kernel's bound T."""


# ---------------------------------------------------------------------------
# multiply-count instrumentation
# ---------------------------------------------------------------------------

class MulCounter:
    """Tallies definitional kernel multiplies per operator name."""

    def __init__(self):
        self.total = 0
        self.by_op: dict = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_ACTIVE_COUNTERS: list = []


@contextmanager
def count_muls():
    """Collect forward multiply counts of temporal operators run inside."""
    counter = MulCounter()
    _ACTIVE_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTERS.remove(counter)


def _record(op: str, n: int) -> None:
    for counter in _ACTIVE_COUNTERS:
        counter.add(op, n)


# ---------------------------------------------------------------------------
# kernel types
# ---------------------------------------------------------------------------

def _wrap_weights(weights, expected_ndim: int, kind: str) -> Tensor:
    t = weights if isinstance(weights, Tensor) else Tensor(weights, requires_grad=True)
    if t.data.ndim != expected_ndim:
        raise ShapeError(f"{kind} weights must be rank {expected_ndim}, got {t.data.shape}")
    return t


class TemporalConvKernel:
    """Standard temporal convolution weights, (C_out, C_in, K), K odd."""

    def __init__(self, weights):
        self.weights = _wrap_weights(weights, 3, "TemporalConvKernel")
        c_out, c_in, k = self.weights.data.shape
        if k % 2 == 0:
            raise ShapeError(f"temporal extent K must be odd, got {k}")
        self.c_out, self.c_in, self.k = c_out, c_in, k

    @classmethod
    def init(cls, c_out: int, c_in: int, k: int, rng: np.random.Generator,
             dtype=np.float32) -> "TemporalConvKernel":
        bound = float(np.sqrt(1.0 / (c_in * k)))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k)).astype(dtype)
        return cls(Tensor(w, requires_grad=True, dtype=dtype))

    @property
    def param_count(self) -> int:
        return self.c_out * self.c_in * self.k


class FullTemporalFcKernel:
    """Unshared temporal fully connected weights, (C_out, C_in, T, T)."""

    def __init__(self, weights):
        self.weights = _wrap_weights(weights, 4, "FullTemporalFcKernel")
        c_out, c_in, t, t2 = self.weights.data.shape
        if t != t2:
            raise ShapeError(f"mixing matrices must be square, got {t}x{t2}")
        self.c_out, self.c_in, self.t = c_out, c_in, t

    @classmethod
    def init(cls, c_out: int, c_in: int, t: int, rng: np.random.Generator,
             dtype=np.float32) -> "FullTemporalFcKernel":
        bound = float(np.sqrt(1.0 / (c_in * t)))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, t, t)).astype(dtype)
        return cls(Tensor(w, requires_grad=True, dtype=dtype))

    @property
    def param_count(self) -> int:
        return self.c_out * self.c_in * self.t * self.t


class TfcKernel:
    """Shared temporal fully connected weights, (C_out, T, T).

    One T by T mixing matrix per output channel, applied to the channel
    mean of the input.  T is bound at construction.
    """

    def __init__(self, weights):
        self.weights = _wrap_weights(weights, 3, "TfcKernel")
        c_out, t, t2 = self.weights.data.shape
        if t != t2:
            raise ShapeError(f"mixing matrices must be square, got {t}x{t2}")
        self.c_out, self.t = c_out, t

    @classmethod
    def init(cls, c_out: int, t: int, rng: np.random.Generator,
             noise: float = 0.01, dtype=np.float32) -> "TfcKernel":
        # Near-identity start: the branch begins as a per-frame pass-through,
        # which keeps a freshly converted host block close to its base block.
        w = np.eye(t)[None, :, :] + noise * rng.standard_normal((c_out, t, t))
        return cls(Tensor(w.astype(dtype), requires_grad=True, dtype=dtype))

    @classmethod
    def zeros(cls, c_out: int, t: int, dtype=np.float32) -> "TfcKernel":
        return cls(Tensor(np.zeros((c_out, t, t), dtype=dtype), requires_grad=True,
                          dtype=dtype))

    @property
    def param_count(self) -> int:
        return self.c_out * self.t * self.t

    def tiled(self, c_in: int) -> FullTemporalFcKernel:
        """The equivalent unshared kernel with weights tied across C_in."""
        tiled = np.repeat(self.weights.data[:, None, :, :], c_in, axis=1)
        return FullTemporalFcKernel(Tensor(tiled, dtype=self.weights.data.dtype))


class DepthwiseTemporalKernel:
    """Per-channel temporal filter weights, (C, K), K odd."""

    def __init__(self, weights):
        self.weights = _wrap_weights(weights, 2, "DepthwiseTemporalKernel")
        c, k = self.weights.data.shape
        if k % 2 == 0:
            raise ShapeError(f"temporal extent K must be odd, got {k}")
        self.c, self.k = c, k

    @classmethod
    def init(cls, c: int, k: int, dtype=np.float32) -> "DepthwiseTemporalKernel":
        # Zero start makes the residual form an exact identity at insertion.
        return cls(Tensor(np.zeros((c, k), dtype=dtype), requires_grad=True, dtype=dtype))

    @property
    def param_count(self) -> int:
        return self.c * self.k


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _check_video(v: Tensor, op: str) -> tuple:
    if v.data.ndim != 5:
        raise ShapeError(f"{op} expects a rank-5 (B,C,T,H,W) tensor, got {v.data.shape}")
    return v.data.shape


def _check_bound_t(t_in: int, t_kernel: int, op: str) -> None:
    if t_in != t_kernel:
        raise TemporalLengthError(
            f"{op}: kernel is bound to T={t_kernel} but input has T={t_in}")


def _padded_windows(data: np.ndarray, k: int) -> np.ndarray:
    """All K temporal windows of a zero-padded (B,C,T,H,W) array.

    Returns (B, C, K, T, H, W) where [..., i, t, ...] is frame t - pad + i.
    """
    b, c, t, h, w = data.shape
    pad = (k - 1) // 2
    padded = np.zeros((b, c, t + 2 * pad, h, w), dtype=data.dtype)
    padded[:, :, pad:pad + t] = data
    return np.stack([padded[:, :, i:i + t] for i in range(k)], axis=2)


def _scatter_depthwise(grad_out: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-channel window gradients folded back onto the unpadded input;
    weights are (C, K) against (B, C, T, H, W) output grads."""
    b, c, t = grad_out.shape[:3]
    k = weights.shape[-1]
    pad = (k - 1) // 2
    acc = np.zeros((b, c, t + 2 * pad) + grad_out.shape[3:], dtype=grad_out.dtype)
    for i in range(k):
        acc[:, :, i:i + t] += weights[:, i][None, :, None, None, None] * grad_out
    return acc[:, :, pad:pad + t]


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def temporal_conv(v: Tensor, kernel: TemporalConvKernel) -> Tensor:
    """Local temporal convolution (cross-correlation), T preserved.

    One matrix multiply over a channel-major column buffer of the K
    temporal windows; the buffer is reused by the backward pass.
    """
    b, c, t, h, w = _check_video(v, "temporal_conv")
    if c != kernel.c_in:
        raise ShapeError(f"temporal_conv: input has {c} channels, kernel expects {kernel.c_in}")
    if kernel.k > t:
        raise ShapeError(f"temporal_conv: K={kernel.k} exceeds T={t}")
    wt = kernel.weights
    k = kernel.k
    pad = (k - 1) // 2
    n_cols = b * t * h * w
    padded = np.zeros((b, c, t + 2 * pad, h, w), dtype=v.data.dtype)
    padded[:, :, pad:pad + t] = v.data
    cols = np.empty((c, k, b, t, h, w), dtype=v.data.dtype)
    for i in range(k):
        cols[:, i] = padded[:, :, i:i + t].transpose(1, 0, 2, 3, 4)
    cols = cols.reshape(c * k, n_cols)
    w2 = wt.data.reshape(kernel.c_out, c * k)
    out_data = np.ascontiguousarray(
        (w2 @ cols).reshape(kernel.c_out, b, t, h, w).transpose(1, 0, 2, 3, 4))
    _record("temporal_conv", b * kernel.c_out * h * w * t * c * k)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(
            kernel.c_out, n_cols)
        if wt.requires_grad:
            wt._accumulate((g2 @ cols.T).reshape(wt.data.shape))
        if v.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, b, t, h, w)
            dpad = np.zeros_like(padded)
            for i in range(k):
                dpad[:, :, i:i + t] += dcols[:, i].transpose(1, 0, 2, 3, 4)
            v._accumulate(dpad[:, :, pad:pad + t])

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out


def full_temporal_fc(v: Tensor, kernel: FullTemporalFcKernel) -> Tensor:
    """Per-(output, input)-channel T by T temporal maps, summed over input channels."""
    b, c, t, h, w = _check_video(v, "full_temporal_fc")
    if c != kernel.c_in:
        raise ShapeError(f"full_temporal_fc: input has {c} channels, kernel expects {kernel.c_in}")
    _check_bound_t(t, kernel.t, "full_temporal_fc")
    wt = kernel.weights
    # (j,c,t,s) x (b,c,s,h,w) -> (j,t,b,h,w)
    raw = np.tensordot(wt.data, v.data, axes=([1, 3], [1, 2]))
    out_data = np.ascontiguousarray(raw.transpose(2, 0, 1, 3, 4))
    _record("full_temporal_fc", b * kernel.c_out * h * w * t * c * t)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if wt.requires_grad:
            # (b,j,t,h,w) x (b,c,s,h,w) -> (j,t,c,s)
            dw = np.tensordot(g, v.data, axes=([0, 3, 4], [0, 3, 4]))
            wt._accumulate(dw.transpose(0, 2, 1, 3))
        if v.requires_grad:
            # (j,c,t,s) x (b,j,t,h,w) -> (c,s,b,h,w)
            dv = np.tensordot(wt.data, g, axes=([0, 2], [1, 2]))
            v._accumulate(np.ascontiguousarray(dv.transpose(2, 0, 1, 3, 4)))

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out


def tfc_shared(v: Tensor, kernel: TfcKernel) -> Tensor:
    """Shared-kernel temporal fully connected map: transform each input
    channel with the same per-output-channel matrix, then sum channels."""
    b, c, t, h, w = _check_video(v, "tfc_shared")
    _check_bound_t(t, kernel.t, "tfc_shared")
    wt = kernel.weights
    # (j,t,s) x (b,c,s,h,w) -> (j,t,b,c,h,w); channel sum afterwards
    per_channel = np.tensordot(wt.data, v.data, axes=([2], [2]))
    out_data = np.ascontiguousarray(
        per_channel.sum(axis=3).transpose(2, 0, 1, 3, 4))
    _record("tfc_shared", b * kernel.c_out * h * w * c * t * t)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if wt.requires_grad:
            vsum = v.data.sum(axis=1)  # (b,s,h,w)
            dw = np.tensordot(g, vsum, axes=([0, 3, 4], [0, 2, 3]))
            wt._accumulate(dw)
        if v.requires_grad:
            # (j,t,s) x (b,j,t,h,w) -> (s,b,h,w), identical for every channel
            ds = np.tensordot(wt.data, g, axes=([0, 1], [1, 2]))
            dv = np.repeat(ds.transpose(1, 0, 2, 3)[:, None], c, axis=1)
            v._accumulate(dv)

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out


def tfc_reordered(v: Tensor, kernel: TfcKernel) -> Tensor:
    """Algebraically equal to :func:`tfc_shared` with the channel sum
    hoisted in front of the kernel, cutting kernel multiplies by C_in."""
    b, c, t, h, w = _check_video(v, "tfc_reordered")
    _check_bound_t(t, kernel.t, "tfc_reordered")
    wt = kernel.weights
    vsum = v.data.sum(axis=1)  # (b,s,h,w)
    # (j,t,s) x (b,s,h,w) -> (j,t,b,h,w)
    raw = np.tensordot(wt.data, vsum, axes=([2], [1]))
    out_data = np.ascontiguousarray(raw.transpose(2, 0, 1, 3, 4))
    _record("tfc_reordered", b * kernel.c_out * h * w * t * t)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if wt.requires_grad:
            dw = np.tensordot(g, vsum, axes=([0, 3, 4], [0, 2, 3]))
            wt._accumulate(dw)
        if v.requires_grad:
            ds = np.tensordot(wt.data, g, axes=([0, 1], [1, 2]))
            dv = np.repeat(ds.transpose(1, 0, 2, 3)[:, None], c, axis=1)
            v._accumulate(dv)

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out


def tfc(v: Tensor, kernel: TfcKernel) -> Tensor:
    """The production operator: per-output-channel T by T map applied to
    the channel mean at every spatial location.  Bias free; equals
    :func:`tfc_reordered` scaled by 1/C_in."""
    b, c, t, h, w = _check_video(v, "tfc")
    _check_bound_t(t, kernel.t, "tfc")
    wt = kernel.weights
    inv_c = 1.0 / c
    mean = (v.data.sum(axis=1, dtype=np.float64) * inv_c).astype(v.data.dtype)
    raw = np.tensordot(wt.data, mean, axes=([2], [1]))
    out_data = np.ascontiguousarray(raw.transpose(2, 0, 1, 3, 4))
    _record("tfc", b * kernel.c_out * h * w * t * t)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if wt.requires_grad:
            dw = np.tensordot(g, mean, axes=([0, 3, 4], [0, 2, 3]))
            wt._accumulate(dw)
        if v.requires_grad:
            ds = np.tensordot(wt.data, g, axes=([0, 1], [1, 2]))
            dv = np.repeat(ds.transpose(1, 0, 2, 3)[:, None], c, axis=1)
            v._accumulate(dv * v.data.dtype.type(inv_c))

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out


def rdw(v: Tensor, kernel: DepthwiseTemporalKernel) -> Tensor:
    """Residual depthwise temporal convolution: identity plus a per-channel
    temporal filter.  A zero kernel makes this an exact identity."""
    b, c, t, h, w = _check_video(v, "rdw")
    if c != kernel.c:
        raise ShapeError(f"rdw: input has {c} channels, kernel has {kernel.c}")
    if kernel.k > t:
        raise ShapeError(f"rdw: K={kernel.k} exceeds T={t}")
    wt = kernel.weights
    windows = _padded_windows(v.data, kernel.k)
    filt = np.einsum("ck,bckthw->bcthw", wt.data, windows)
    out_data = v.data + filt
    _record("rdw", b * c * t * h * w * kernel.k)
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        if wt.requires_grad:
            dw = np.einsum("bcthw,bckthw->ck", g, windows)
            wt._accumulate(dw)
        if v.requires_grad:
            v._accumulate(g + _scatter_depthwise(g, wt.data))

    out = _make(out_data, (v, wt), backward)
    out_holder["out"] = out
    return out
