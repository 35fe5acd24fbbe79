"""Closed-form parameter and multiply counts for single operators and
whole networks.

Counts follow the multiply-accumulate convention: one MAC is one FLOP.
Residual additions, channel means and normalization arithmetic are not
counted; parameters count every trainable weight, including the affine
pairs of batch normalization and the classifier bias.

The squeeze-excitation and non-local rows exist only here, as literal
closed forms for comparison; there is no runtime implementation of them.
Divisors in those rows round down when they do not divide evenly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Tuple

from .blocks import BlockSpec, NetworkSpec


@dataclass(frozen=True)
class OpCost:
    label: str
    params: int
    flops: int

    def __post_init__(self):
        if self.params < 0 or self.flops < 0:
            raise ValueError(f"{self.label}: negative cost")


@dataclass
class CostReport:
    items: List[OpCost]

    @property
    def total_params(self) -> int:
        return sum(i.params for i in self.items)

    @property
    def total_flops(self) -> int:
        return sum(i.flops for i in self.items)

    def diff(self, other: "CostReport") -> Tuple[int, int]:
        """(params, flops) of self minus other."""
        return (self.total_params - other.total_params,
                self.total_flops - other.total_flops)

    def ratios(self, baseline_label: Optional[str] = None) -> dict:
        """Per-item (params, flops) ratios against a baseline item."""
        base = self.items[0] if baseline_label is None else next(
            i for i in self.items if i.label == baseline_label)
        out = {}
        for item in self.items:
            pr = Fraction(item.params, base.params) if base.params else None
            fr = Fraction(item.flops, base.flops) if base.flops else None
            out[item.label] = (pr, fr)
        return out

    def to_json(self) -> str:
        return json.dumps({
            "items": [{"label": i.label, "params": i.params, "flops": i.flops}
                      for i in self.items],
            "total_params": self.total_params,
            "total_flops": self.total_flops,
        }, indent=2)

    def format_table(self) -> str:
        rows = [(i.label, f"{i.params:,}", f"{i.flops:,}") for i in self.items]
        rows.append(("TOTAL", f"{self.total_params:,}", f"{self.total_flops:,}"))
        widths = [max(len(r[c]) for r in rows + [("operation", "params", "flops")])
                  for c in range(3)]
        header = f"{'operation':<{widths[0]}}  {'params':>{widths[1]}}  {'flops':>{widths[2]}}"
        lines = [header, "-" * len(header)]
        for label, p, f in rows:
            lines.append(f"{label:<{widths[0]}}  {p:>{widths[1]}}  {f:>{widths[2]}}")
        return "\n".join(lines)


def _positive(**kwargs) -> None:
    for name, value in kwargs.items():
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")


# ---------------------------------------------------------------------------
# single-operator closed forms
# ---------------------------------------------------------------------------

def cost_temporal_conv(b: int, c_in: int, c_out: int, t: int, h: int, w: int,
                       k: int) -> OpCost:
    _positive(b=b, c_in=c_in, c_out=c_out, t=t, h=h, w=w, k=k)
    return OpCost("temporal_conv", c_out * c_in * k, b * c_out * h * w * t * c_in * k)


def cost_full_fc(b: int, c_in: int, c_out: int, t: int, h: int, w: int) -> OpCost:
    _positive(b=b, c_in=c_in, c_out=c_out, t=t, h=h, w=w)
    return OpCost("full_temporal_fc", c_out * c_in * t * t,
                  b * c_out * h * w * t * c_in * t)


def cost_tfc(b: int, c_in: int, c_out: int, t: int, h: int, w: int) -> OpCost:
    # c_in is accepted for signature symmetry; neither count depends on it.
    _positive(b=b, c_in=c_in, c_out=c_out, t=t, h=h, w=w)
    return OpCost("tfc", c_out * t * t, b * c_out * h * w * t * t)


def cost_se(b: int, c_in: int) -> OpCost:
    _positive(b=b, c_in=c_in)
    return OpCost("se", c_in * c_in // 8, b * c_in * c_in // 8)


def cost_nonlocal(b: int, c_in: int, t: int, h: int, w: int) -> OpCost:
    _positive(b=b, c_in=c_in, t=t, h=h, w=w)
    params = c_in * (c_in // 2) * 4
    flops = (b * (c_in // 2) * h * w * t * c_in * 4
             + b * c_in * t * h * w * t * h * w)
    return OpCost("nonlocal", params, flops)


def cost_temporal_nonlocal(b: int, c_in: int, t: int, h: int, w: int) -> OpCost:
    _positive(b=b, c_in=c_in, t=t, h=h, w=w)
    params = c_in * (c_in // 4) * 3 + (c_in // 4) * (c_in // 4)
    # the 3.25 embedding factor is kept exact as 13/4 before flooring
    flops = (b * (c_in // 4) * h * w * t * c_in * 13 // 4
             + b * (c_in // 2) * t * t * h * w)
    return OpCost("temporal_nonlocal", params, flops)


def cost_rdw(b: int, c: int, t: int, h: int, w: int, k: int) -> OpCost:
    _positive(b=b, c=c, t=t, h=h, w=w, k=k)
    return OpCost("rdw", c * k, b * c * t * h * w * k)


def operator_comparison(b: int, c_in: int, c_out: int, t: int, h: int, w: int,
                        k: int) -> CostReport:
    """All six comparison rows at one operating point."""
    return CostReport([
        cost_temporal_conv(b, c_in, c_out, t, h, w, k),
        cost_full_fc(b, c_in, c_out, t, h, w),
        cost_tfc(b, c_in, c_out, t, h, w),
        cost_se(b, c_in),
        cost_nonlocal(b, c_in, t, h, w),
        cost_temporal_nonlocal(b, c_in, t, h, w),
    ])


# ---------------------------------------------------------------------------
# whole-network accounting
# ---------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int) -> int:
    return (size + 2 * (k // 2) - k) // stride + 1


def _block_costs(prefix: str, spec: BlockSpec, t: int, b: int, h: int, w: int,
                 items: List[OpCost]) -> Tuple[int, int]:
    """Append one block's costs; returns the output (h, w)."""
    cin, mid, cout = spec.in_channels, spec.mid_channels, spec.out_channels
    h2, w2 = _conv_out(h, 3, spec.stride), _conv_out(w, 3, spec.stride)

    if spec.kind == "bottleneck3d_temporal":
        c = cost_temporal_conv(b, cin, mid, t, h, w, 3)
        items.append(OpCost(f"{prefix}.first[3x1x1]", c.params, c.flops))
    elif spec.kind == "rdw_basic":
        items.append(OpCost(f"{prefix}.first[1x3x3]", mid * cin * 9,
                            b * mid * cin * 9 * h * w * t))
    else:
        items.append(OpCost(f"{prefix}.first[1x1x1]", mid * cin,
                            b * mid * cin * h * w * t))
    if spec.tfc:
        c = cost_tfc(b, cin, spec.tfc_branch_channels, t, h, w)
        items.append(OpCost(f"{prefix}.tfc", c.params, c.flops))
    items.append(OpCost(f"{prefix}.bn1", 2 * mid, 0))

    if spec.kind in ("rdw_basic", "rdw_bottleneck"):
        c = cost_rdw(b, mid, t, h, w, 3)
        items.append(OpCost(f"{prefix}.rdw1", c.params, c.flops))

    if spec.kind == "rdw_basic":
        items.append(OpCost(f"{prefix}.conv2[1x3x3]", cout * mid * 9,
                            b * cout * mid * 9 * h2 * w2 * t))
        items.append(OpCost(f"{prefix}.bn2", 2 * cout, 0))
        c = cost_rdw(b, cout, t, h2, w2, 3)
        items.append(OpCost(f"{prefix}.rdw2", c.params, c.flops))
    else:
        items.append(OpCost(f"{prefix}.conv2[1x3x3]", mid * mid * 9,
                            b * mid * mid * 9 * h2 * w2 * t))
        items.append(OpCost(f"{prefix}.bn2", 2 * mid, 0))
        items.append(OpCost(f"{prefix}.conv3[1x1x1]", cout * mid,
                            b * cout * mid * h2 * w2 * t))
        items.append(OpCost(f"{prefix}.bn3", 2 * cout, 0))

    if spec.stride != 1 or cin != cout:
        items.append(OpCost(f"{prefix}.proj[1x1x1]", cout * cin,
                            b * cout * cin * h2 * w2 * t))
        items.append(OpCost(f"{prefix}.bn_proj", 2 * cout, 0))
    return h2, w2


def cost_network(spec: NetworkSpec, batch: int, height: int, width: int) -> CostReport:
    """Exact parameter and multiply tally of a network built from ``spec``.

    Parameters match the built network's weight buffers one for one; the
    multiply tally covers convolutions, temporal operators and the
    classifier at the resolution each one actually runs at.
    """
    _positive(batch=batch, height=height, width=width)
    t = spec.temporal_length
    items: List[OpCost] = []
    h = _conv_out(height, spec.stem_kernel, spec.stem_stride)
    w = _conv_out(width, spec.stem_kernel, spec.stem_stride)
    kk = spec.stem_kernel * spec.stem_kernel
    items.append(OpCost("stem.conv", spec.stem_width * spec.in_channels * kk,
                        batch * spec.stem_width * spec.in_channels * kk * h * w * t))
    items.append(OpCost("stem_bn", 2 * spec.stem_width, 0))
    for si, stage in enumerate(spec.stages):
        for bi, block in enumerate(stage):
            h, w = _block_costs(f"stages.{si}.{bi}", block, t, batch, h, w, items)
    c_feat = spec.out_channels
    fc_params = c_feat * spec.num_classes + spec.num_classes
    if spec.head == "pool3d":
        fc_flops = batch * c_feat * spec.num_classes
    else:
        fc_flops = batch * t * c_feat * spec.num_classes
    items.append(OpCost("head.fc", fc_params, fc_flops))
    return CostReport(items)


def paper_scale_spec(kind: str = "v3d", temporal_length: int = 32,
                     num_classes: int = 36) -> NetworkSpec:
    """Reference-scale layout (50-layer backbone pattern, 224px inputs).

    The second stage strides in place of a pooling layer, so stage
    resolutions come out at 56, 28, 14 and 7 for 224px inputs.
    """
    from .blocks import make_stages
    if kind == "tsn":
        kinds = ["bottleneck2d"] * 4
        head = "frame_average"
    elif kind == "v3d":
        kinds = ["bottleneck2d", "bottleneck2d",
                 "bottleneck3d_temporal", "bottleneck3d_temporal"]
        head = "pool3d"
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    stages = make_stages(kinds, (256, 512, 1024, 2048), (3, 4, 6, 3),
                         stem_width=64, strides=(2, 2, 2, 2))
    return NetworkSpec(stem_width=64, stages=stages, temporal_length=temporal_length,
                       num_classes=num_classes, head=head, stem_kernel=7, stem_stride=2)
