"""Composable video-network blocks and whole-network builders.

A network is a stem (spatial conv), four residual stages, and a head.
Blocks come in four base kinds:

* ``bottleneck2d``        1x1x1 reduce, 1x3x3 spatial, 1x1x1 expand
* ``bottleneck3d_temporal``  3x1x1 temporal reduce, 1x3x3 spatial, 1x1x1 expand
* ``rdw_basic``           two 1x3x3 convs, each followed by a residual
                          depthwise temporal filter
* ``rdw_bottleneck``      1x1x1 reduce, residual depthwise filter, 1x3x3,
                          1x1x1 expand

Any base block can carry a global-temporal branch: the designated kernel
(the first temporal convolution if the block has one, otherwise the first
convolution) gains a parallel per-output-channel T by T temporal map whose
output is summed elementwise with the kernel's output.  The branch is bias
free and carries no normalization of its own.

Spatial downsampling always lives on the 1x3x3 convolution, so the
designated kernel of a strided block still runs at the block's input
resolution and the parallel branch composes without a stride of its own.
Temporal length is never reduced anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tt
from .tensor import ShapeError, Tensor, _make
from . import temporal as top
from .temporal import DepthwiseTemporalKernel, TemporalConvKernel, TfcKernel

BLOCK_KINDS = ("bottleneck2d", "bottleneck3d_temporal", "rdw_basic", "rdw_bottleneck")
HEAD_KINDS = ("pool3d", "frame_average")


# ---------------------------------------------------------------------------
# declarative specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    mid_channels: int
    out_channels: int
    stride: int = 1
    tfc: bool = False

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"spatial stride must be 1 or 2, got {self.stride}")

    @property
    def has_temporal_conv(self) -> bool:
        return self.kind == "bottleneck3d_temporal"

    @property
    def tfc_branch_channels(self) -> int:
        """Output channels of the designated kernel the branch parallels."""
        return self.mid_channels


def tfc_variant_of(base: BlockSpec) -> BlockSpec:
    if base.tfc:
        raise ValueError("block already carries a global-temporal branch")
    return replace(base, tfc=True)


@dataclass(frozen=True)
class NetworkSpec:
    stem_width: int
    stages: Tuple[Tuple[BlockSpec, ...], ...]
    temporal_length: int
    num_classes: int
    head: str = "pool3d"
    in_channels: int = 3
    stem_kernel: int = 3
    stem_stride: int = 2

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.temporal_length < 1:
            raise ValueError("temporal_length must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][-1].out_channels


def make_stages(kinds: Sequence[str], widths: Sequence[int], repeats: Sequence[int],
                stem_width: int, strides: Sequence[int] = (1, 2, 2, 2),
                bottleneck_ratio: int = 4) -> Tuple[Tuple[BlockSpec, ...], ...]:
    """Expand per-stage (kind, width, repeat) rows into per-block specs."""
    if not (len(kinds) == len(widths) == len(repeats) == len(strides)):
        raise ValueError("kinds, widths, repeats, strides must align")
    stages = []
    in_ch = stem_width
    for kind, width, repeat, stride in zip(kinds, widths, repeats, strides):
        mid = width if kind == "rdw_basic" else max(1, width // bottleneck_ratio)
        blocks = []
        for i in range(repeat):
            blocks.append(BlockSpec(kind=kind, in_channels=in_ch, mid_channels=mid,
                                    out_channels=width, stride=stride if i == 0 else 1))
            in_ch = width
        stages.append(tuple(blocks))
    return tuple(stages)


def mini_spec(kind: str = "v3d", temporal_length: int = 16, num_classes: int = 16,
              widths: Sequence[int] = (16, 32, 64, 128),
              repeats: Sequence[int] = (1, 2, 2, 1),
              stem_width: int = 16) -> NetworkSpec:
    """Desk-scale profiles.  ``tsn`` is all-2D with per-frame score
    averaging; ``v3d`` adds temporal convolutions in the last two stages
    and pools before the classifier; ``v3d_depthwise`` uses residual
    depthwise temporal filters instead."""
    if kind == "tsn":
        kinds = ["bottleneck2d"] * 4
        head = "frame_average"
    elif kind == "v3d":
        kinds = ["bottleneck2d", "bottleneck2d",
                 "bottleneck3d_temporal", "bottleneck3d_temporal"]
        head = "pool3d"
    elif kind == "v3d_depthwise":
        kinds = ["bottleneck2d", "rdw_bottleneck", "rdw_bottleneck", "rdw_bottleneck"]
        head = "pool3d"
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    stages = make_stages(kinds, widths, repeats, stem_width)
    return NetworkSpec(stem_width=stem_width, stages=stages,
                       temporal_length=temporal_length, num_classes=num_classes,
                       head=head)


def place_tfc_blocks(net: NetworkSpec, policy: str, phase: int = 0) -> NetworkSpec:
    """Mark blocks for conversion to global-temporal variants.

    * ``v3d`` converts every other block (phase, phase+2, ...) of the
      second and third stages.
    * ``tsn`` converts every block of the last two stages.
    * ``none`` returns the spec unchanged.
    """
    if policy == "none":
        return net
    if len(net.stages) < 4:
        raise ValueError("placement policies expect at least 4 stages")
    if policy == "v3d":
        targets = {1: "every_other", 2: "every_other"}
    elif policy == "tsn":
        n = len(net.stages)
        targets = {n - 2: "all", n - 1: "all"}
    else:
        raise ValueError(f"unknown placement policy {policy!r}")
    stages = []
    for si, stage in enumerate(net.stages):
        rule = targets.get(si)
        if rule is None:
            stages.append(stage)
            continue
        blocks = []
        for bi, b in enumerate(stage):
            convert = rule == "all" or (bi >= phase and (bi - phase) % 2 == 0)
            blocks.append(tfc_variant_of(b) if convert else b)
        stages.append(tuple(blocks))
    return replace(net, stages=tuple(stages))


# ---------------------------------------------------------------------------
# spatial convolution and batch normalization
# ---------------------------------------------------------------------------

def conv_spatial(v: Tensor, weights: Tensor, stride: int = 1) -> Tensor:
    """Per-frame 2D convolution of (B,C,T,H,W) with (C_out,C_in,k,k) weights.

    Symmetric zero padding of k//2, so stride 1 preserves H,W and stride 2
    halves even sizes.  Runs as one matrix multiply over an explicit
    channel-major column buffer, which the backward pass reuses.
    """
    if v.data.ndim != 5:
        raise ShapeError(f"conv_spatial expects rank 5, got {v.data.shape}")
    b, c, t, h, w = v.data.shape
    c_out, c_in, kh, kw = weights.data.shape
    if c != c_in:
        raise ShapeError(f"conv_spatial: input has {c} channels, kernel expects {c_in}")
    pad = kh // 2
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    n_cols = b * t * h_out * w_out

    if kh == 1 and kw == 1:
        src = v.data if stride == 1 else v.data[:, :, :, ::stride, ::stride]
        cols = np.ascontiguousarray(src.transpose(1, 0, 2, 3, 4)).reshape(c, n_cols)
    else:
        padded = np.zeros((b, c, t, h + 2 * pad, w + 2 * pad), dtype=v.data.dtype)
        padded[:, :, :, pad:pad + h, pad:pad + w] = v.data
        cols = np.empty((c, kh, kw, b, t, h_out, w_out), dtype=v.data.dtype)
        for i in range(kh):
            for j in range(kw):
                win = padded[:, :, :, i:i + (h_out - 1) * stride + 1:stride,
                             j:j + (w_out - 1) * stride + 1:stride]
                cols[:, i, j] = win.transpose(1, 0, 2, 3, 4)
        cols = cols.reshape(c * kh * kw, n_cols)
    w2 = weights.data.reshape(c_out, c * kh * kw)
    out_data = np.ascontiguousarray(
        (w2 @ cols).reshape(c_out, b, t, h_out, w_out).transpose(1, 0, 2, 3, 4))
    out_holder = {}

    def backward():
        g = out_holder["out"].grad
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(c_out, n_cols)
        if weights.requires_grad:
            weights._accumulate((g2 @ cols.T).reshape(weights.data.shape))
        if v.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, b, t, h_out, w_out)
            if kh == 1 and kw == 1:
                dsrc = dcols[:, 0, 0].transpose(1, 0, 2, 3, 4)
                if stride == 1:
                    v._accumulate(np.ascontiguousarray(dsrc))
                else:
                    dv = np.zeros_like(v.data)
                    dv[:, :, :, ::stride, ::stride] = dsrc
                    v._accumulate(dv)
            else:
                dpad = np.zeros((b, c, t, h + 2 * pad, w + 2 * pad),
                                dtype=v.data.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dpad[:, :, :, i:i + (h_out - 1) * stride + 1:stride,
                             j:j + (w_out - 1) * stride + 1:stride] += \
                            dcols[:, i, j].transpose(1, 0, 2, 3, 4)
                v._accumulate(dpad[:, :, :, pad:pad + h, pad:pad + w])

    out = _make(out_data, (v, weights), backward)
    out_holder["out"] = out
    return out


class SpatialConv:
    """1 x k x k convolution layer (no bias; normalization follows)."""

    def __init__(self, c_in: int, c_out: int, k: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        bound = float(np.sqrt(6.0 / (c_in * k * k)))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)
        self.weights = Tensor(w, requires_grad=True, dtype=dtype)
        self.stride = stride
        self.c_in, self.c_out, self.k = c_in, c_out, k

    def forward(self, x: Tensor) -> Tensor:
        return conv_spatial(x, self.weights, self.stride)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weights)]


class TemporalConvLayer:
    """3 x 1 x 1 temporal convolution layer (stride 1, T preserved)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.kernel = TemporalConvKernel.init(c_out, c_in, k, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return top.temporal_conv(x, self.kernel)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.kernel.weights)]


class BatchNorm:
    """Per-channel batch normalization over (B, T, H, W)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.channels = channels

    def forward(self, v: Tensor, training: bool) -> Tensor:
        if v.data.ndim != 5 or v.data.shape[1] != self.channels:
            raise ShapeError(f"batchnorm over {self.channels} channels got {v.data.shape}")
        axes = (0, 2, 3, 4)
        n = v.data.shape[0] * v.data.shape[2] * v.data.shape[3] * v.data.shape[4]
        dt = v.data.dtype
        if training:
            mean = v.data.mean(axis=axes)
            var = v.data.var(axis=axes)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean.astype(dt) + m * mean).astype(dt)
            self.running_var = ((1 - m) * self.running_var.astype(dt) + m * var).astype(dt)
        else:
            mean = self.running_mean.astype(dt)
            var = self.running_var.astype(dt)
        inv = (1.0 / np.sqrt(var.astype(np.float64) + self.eps)).astype(dt)
        xhat = (v.data - mean[None, :, None, None, None]) * inv[None, :, None, None, None]
        out_data = (self.gamma.data[None, :, None, None, None] * xhat
                    + self.beta.data[None, :, None, None, None])
        gamma, beta = self.gamma, self.beta
        out_holder = {}

        def backward():
            g = out_holder["out"].grad
            gxsum = (g * xhat).sum(axis=axes)
            gsum = g.sum(axis=axes)
            if beta.requires_grad:
                beta._accumulate(gsum)
            if gamma.requires_grad:
                gamma._accumulate(gxsum)
            if v.requires_grad:
                scale = (gamma.data * inv)[None, :, None, None, None]
                if training:
                    dx = scale * (g - gsum[None, :, None, None, None] / n
                                  - xhat * (gxsum[None, :, None, None, None] / n))
                else:
                    dx = scale * g
                v._accumulate(dx)

        out = _make(out_data, (v, gamma, beta), backward)
        out_holder["out"] = out
        return out

    def named_params(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_state(self, prefix: str):
        return [(f"{prefix}.running_mean", self.running_mean),
                (f"{prefix}.running_var", self.running_var)]

    def set_state(self, name: str, value: np.ndarray) -> None:
        if name.endswith("running_mean"):
            self.running_mean = value.astype(self.running_mean.dtype)
        else:
            self.running_var = value.astype(self.running_var.dtype)


# ---------------------------------------------------------------------------
# residual blocks
# ---------------------------------------------------------------------------

class ResidualBlock:
    """One residual block built from a :class:`BlockSpec`."""

    def __init__(self, spec: BlockSpec, temporal_length: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.t = temporal_length
        k = spec.kind
        cin, mid, cout = spec.in_channels, spec.mid_channels, spec.out_channels

        if k == "bottleneck2d":
            self.first = SpatialConv(cin, mid, 1, 1, rng, dtype)
        elif k == "bottleneck3d_temporal":
            self.first = TemporalConvLayer(cin, mid, 3, rng, dtype)
        elif k == "rdw_basic":
            self.first = SpatialConv(cin, mid, 3, 1, rng, dtype)
        else:  # rdw_bottleneck
            self.first = SpatialConv(cin, mid, 1, 1, rng, dtype)
        self.bn1 = BatchNorm(mid, dtype=dtype)

        self.rdw1: Optional[DepthwiseTemporalKernel] = None
        self.rdw2: Optional[DepthwiseTemporalKernel] = None
        if k == "rdw_basic":
            self.rdw1 = DepthwiseTemporalKernel.init(mid, 3, dtype=dtype)
            self.conv2 = SpatialConv(mid, cout, 3, spec.stride, rng, dtype)
            self.bn2 = BatchNorm(cout, dtype=dtype)
            self.rdw2 = DepthwiseTemporalKernel.init(cout, 3, dtype=dtype)
            self.conv3 = None
            self.bn3 = None
        else:
            if k == "rdw_bottleneck":
                self.rdw1 = DepthwiseTemporalKernel.init(mid, 3, dtype=dtype)
            self.conv2 = SpatialConv(mid, mid, 3, spec.stride, rng, dtype)
            self.bn2 = BatchNorm(mid, dtype=dtype)
            self.conv3 = SpatialConv(mid, cout, 1, 1, rng, dtype)
            self.bn3 = BatchNorm(cout, dtype=dtype)

        self.tfc_kernel: Optional[TfcKernel] = None
        if spec.tfc:
            self.tfc_kernel = TfcKernel.init(spec.tfc_branch_channels, temporal_length,
                                             rng, dtype=dtype)

        self.proj: Optional[SpatialConv] = None
        self.bn_proj: Optional[BatchNorm] = None
        if spec.stride != 1 or cin != cout:
            self.proj = SpatialConv(cin, cout, 1, spec.stride, rng, dtype)
            self.bn_proj = BatchNorm(cout, dtype=dtype)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        spec = self.spec
        y = self.first.forward(x)
        if self.tfc_kernel is not None:
            if x.data.shape[2] != self.t:
                raise top.TemporalLengthError(
                    f"block is bound to T={self.t}, input has T={x.data.shape[2]}")
            y = tt.add(y, top.tfc(x, self.tfc_kernel))
        y = tt.relu(self.bn1.forward(y, training))
        if self.rdw1 is not None:
            y = top.rdw(y, self.rdw1)
        y = self.conv2.forward(y)
        y = self.bn2.forward(y, training)
        if spec.kind == "rdw_basic":
            y = top.rdw(y, self.rdw2)
        else:
            y = tt.relu(y)
            y = self.conv3.forward(y)
            y = self.bn3.forward(y, training)
        if self.proj is not None:
            skip = self.bn_proj.forward(self.proj.forward(x), training)
        else:
            skip = x
        return tt.relu(tt.add(y, skip))

    def _members(self):
        members = [("first", self.first), ("bn1", self.bn1)]
        if self.rdw1 is not None:
            members.append(("rdw1", self.rdw1))
        members += [("conv2", self.conv2), ("bn2", self.bn2)]
        if self.rdw2 is not None:
            members.append(("rdw2", self.rdw2))
        if self.conv3 is not None:
            members += [("conv3", self.conv3), ("bn3", self.bn3)]
        if self.tfc_kernel is not None:
            members.append(("tfc", self.tfc_kernel))
        if self.proj is not None:
            members += [("proj", self.proj), ("bn_proj", self.bn_proj)]
        return members

    def named_params(self, prefix: str):
        out = []
        for name, member in self._members():
            if isinstance(member, (SpatialConv, TemporalConvLayer, BatchNorm)):
                out += member.named_params(f"{prefix}.{name}")
            else:  # kernel objects
                out.append((f"{prefix}.{name}.weight", member.weights))
        return out

    def named_state(self, prefix: str):
        out = []
        for name, member in self._members():
            if isinstance(member, BatchNorm):
                out += member.named_state(f"{prefix}.{name}")
        return out


# ---------------------------------------------------------------------------
# whole networks
# ---------------------------------------------------------------------------

class Network:
    """An executable network built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.stem = SpatialConv(spec.in_channels, spec.stem_width, spec.stem_kernel,
                                spec.stem_stride, rng, dtype)
        self.stem_bn = BatchNorm(spec.stem_width, dtype=dtype)
        self.stages: List[List[ResidualBlock]] = []
        for stage in spec.stages:
            self.stages.append([ResidualBlock(b, spec.temporal_length, rng, dtype)
                                for b in stage])
        c_feat = spec.out_channels
        bound = float(np.sqrt(1.0 / c_feat))
        self.fc_w = Tensor(rng.uniform(-bound, bound, size=(c_feat, spec.num_classes))
                           .astype(dtype), requires_grad=True, dtype=dtype)
        self.fc_b = Tensor(np.zeros(spec.num_classes, dtype=dtype), requires_grad=True,
                           dtype=dtype)

    def forward(self, video: Tensor, training: bool = False) -> Tensor:
        """Video batch (B, C, T, H, W) to logits (B, num_classes)."""
        if video.data.ndim != 5:
            raise ShapeError(f"expected a rank-5 batch, got {video.data.shape}")
        if video.data.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected {self.spec.in_channels} input channels, "
                             f"got {video.data.shape[1]}")
        if video.data.shape[2] != self.spec.temporal_length:
            raise top.TemporalLengthError(
                f"network is bound to T={self.spec.temporal_length}, "
                f"input has T={video.data.shape[2]}")
        x = tt.relu(self.stem_bn.forward(self.stem.forward(video), training))
        for stage in self.stages:
            for block in stage:
                x = block.forward(x, training)
        if self.spec.head == "pool3d":
            feats = tt.global_avg_pool_3d(x)                  # (B, C)
            return tt.add_bias(tt.matmul(feats, self.fc_w), self.fc_b)
        # frame_average: classify each frame, then average the scores
        b, c, t = x.data.shape[0], x.data.shape[1], x.data.shape[2]
        per_frame = tt.transpose_axes(tt.spatial_avg_pool(x), (0, 2, 1))  # (B, T, C)
        flat = tt.reshape(per_frame, (b * t, c))
        scores = tt.add_bias(tt.matmul(flat, self.fc_w), self.fc_b)
        return tt.mean_axis(tt.reshape(scores, (b, t, self.spec.num_classes)), 1)

    def named_params(self):
        out = self.stem.named_params("stem") + self.stem_bn.named_params("stem_bn")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out += block.named_params(f"stages.{si}.{bi}")
        out += [("head.fc.weight", self.fc_w), ("head.fc.bias", self.fc_b)]
        return out

    def named_state(self):
        out = self.stem_bn.named_state("stem_bn")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out += block.named_state(f"stages.{si}.{bi}")
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(t.data.shape)) for _, t in self.named_params())

    def zero_grads(self) -> None:
        for _, t in self.named_params():
            t.zero_grad()

    def load_arrays(self, params: dict, state: dict) -> None:
        """Install parameter and normalization-state arrays by name."""
        for name, t in self.named_params():
            if name not in params:
                raise KeyError(f"missing parameter {name}")
            arr = np.asarray(params[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
        holders = self._state_holders()
        for name, arr in state.items():
            if name not in holders:
                raise KeyError(f"unknown state entry {name}")
            holders[name].set_state(name, np.asarray(arr))

    def _state_holders(self) -> dict:
        holders = {}
        for name, _ in self.stem_bn.named_state("stem_bn"):
            holders[name] = self.stem_bn
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for mname, member in block._members():
                    if isinstance(member, BatchNorm):
                        for sname, _ in member.named_state(f"stages.{si}.{bi}.{mname}"):
                            holders[sname] = member
        return holders


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, np.random.default_rng(seed), dtype=dtype)


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "stem_width": spec.stem_width,
        "stem_kernel": spec.stem_kernel,
        "stem_stride": spec.stem_stride,
        "in_channels": spec.in_channels,
        "temporal_length": spec.temporal_length,
        "num_classes": spec.num_classes,
        "head": spec.head,
        "stages": [[{"kind": b.kind, "in": b.in_channels, "mid": b.mid_channels,
                     "out": b.out_channels, "stride": b.stride, "tfc": b.tfc}
                    for b in stage] for stage in spec.stages],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    stages = tuple(
        tuple(BlockSpec(kind=b["kind"], in_channels=b["in"], mid_channels=b["mid"],
                        out_channels=b["out"], stride=b["stride"], tfc=b["tfc"])
              for b in stage)
        for stage in d["stages"])
    return NetworkSpec(stem_width=d["stem_width"], stages=stages,
                       temporal_length=d["temporal_length"],
                       num_classes=d["num_classes"], head=d["head"],
                       in_channels=d["in_channels"], stem_kernel=d["stem_kernel"],
                       stem_stride=d["stem_stride"])
