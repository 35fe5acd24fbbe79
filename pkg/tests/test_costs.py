"""Cost model: closed forms, instrumentation equality, network tallies."""

from fractions import Fraction

import numpy as np
import pytest

from tfckit import costs
from tfckit import temporal as top
from tfckit.blocks import build_network, mini_spec, place_tfc_blocks
from tfckit.temporal import (DepthwiseTemporalKernel, FullTemporalFcKernel,
                             TemporalConvKernel, TfcKernel, count_muls)
from tfckit.tensor import Tensor

from test_tensor import rand


class TestClosedForms:
    def test_conv_substitution(self):
        c = costs.cost_temporal_conv(1, 3, 4, 8, 2, 2, 3)
        assert c.params == 36
        assert c.flops == 1152

    def test_conv_all_ones(self):
        c = costs.cost_temporal_conv(1, 1, 1, 1, 1, 1, 1)
        assert (c.params, c.flops) == (1, 1)

    def test_tfc_params(self):
        assert costs.cost_tfc(1, 1, 64, 32, 1, 1).params == 65536

    def test_full_fc_over_conv_params_ratio_is_t2_over_k(self):
        t, k = 32, 3
        full = costs.cost_full_fc(2, 16, 8, t, 4, 4)
        conv = costs.cost_temporal_conv(2, 16, 8, t, 4, 4, k)
        assert Fraction(full.params, conv.params) == Fraction(t * t, k)

    def test_tfc_over_conv_flops_ratio_is_t_over_cin_k(self):
        t, c_in, k = 32, 256, 3
        tfc = costs.cost_tfc(1, c_in, 8, t, 4, 4)
        conv = costs.cost_temporal_conv(1, c_in, 8, t, 4, 4, k)
        assert Fraction(tfc.flops, conv.flops) == Fraction(t, c_in * k) == Fraction(1, 24)

    def test_tfc_independent_of_cin(self):
        reference = costs.cost_tfc(2, 1, 8, 16, 4, 4)
        for c_in in (64, 512):
            other = costs.cost_tfc(2, c_in, 8, 16, 4, 4)
            assert (other.params, other.flops) == (reference.params, reference.flops)

    def test_zero_counts_rejected(self):
        with pytest.raises(ValueError):
            costs.cost_temporal_conv(0, 1, 1, 1, 1, 1, 1)
        with pytest.raises(ValueError):
            costs.cost_tfc(1, 1, 1, 0, 1, 1)

    def test_monotone_in_every_argument(self):
        base = dict(b=2, c_in=3, c_out=4, t=5, h=3, w=3, k=3)
        fns = {
            "temporal_conv": lambda a: costs.cost_temporal_conv(
                a["b"], a["c_in"], a["c_out"], a["t"], a["h"], a["w"], a["k"]),
            "full_fc": lambda a: costs.cost_full_fc(
                a["b"], a["c_in"], a["c_out"], a["t"], a["h"], a["w"]),
            "tfc": lambda a: costs.cost_tfc(
                a["b"], a["c_in"], a["c_out"], a["t"], a["h"], a["w"]),
            "nonlocal": lambda a: costs.cost_nonlocal(
                a["b"], a["c_in"], a["t"], a["h"], a["w"]),
            "temporal_nonlocal": lambda a: costs.cost_temporal_nonlocal(
                a["b"], a["c_in"], a["t"], a["h"], a["w"]),
        }
        for name, fn in fns.items():
            ref = fn(base)
            for arg in base:
                bumped = dict(base)
                bumped[arg] += 2
                out = fn(bumped)
                assert out.params >= ref.params, (name, arg)
                assert out.flops >= ref.flops, (name, arg)

    def test_se_floor(self):
        c = costs.cost_se(1, 12)  # 12*12/8 = 18 exactly
        assert c.params == 18
        c = costs.cost_se(1, 10)  # 100/8 rounds down to 12
        assert c.params == 12


class TestInstrumentationMatchesFormulas:
    @pytest.mark.parametrize("seed", range(6))
    def test_counts_equal_flops(self, seed):
        rng = np.random.default_rng(seed)
        b = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 9))
        c_out = int(rng.integers(1, 6))
        t = int(rng.choice([1, 2, 4, 8]))
        h = int(rng.integers(1, 4))
        w = int(rng.integers(1, 4))
        k = 3 if t >= 3 else 1
        v = Tensor(rand((b, c_in, t, h, w), rng))

        with count_muls() as counter:
            top.temporal_conv(v, TemporalConvKernel.init(c_out, c_in, k, rng))
        assert counter.total == costs.cost_temporal_conv(b, c_in, c_out, t, h, w, k).flops

        with count_muls() as counter:
            top.full_temporal_fc(v, FullTemporalFcKernel.init(c_out, c_in, t, rng))
        assert counter.total == costs.cost_full_fc(b, c_in, c_out, t, h, w).flops

        tk = TfcKernel.init(c_out, t, rng)
        with count_muls() as counter:
            top.tfc_shared(v, tk)
        assert counter.total == costs.cost_full_fc(b, c_in, c_out, t, h, w).flops

        with count_muls() as counter:
            top.tfc_reordered(v, tk)
        assert counter.total == costs.cost_tfc(b, c_in, c_out, t, h, w).flops

        with count_muls() as counter:
            top.tfc(v, tk)
        assert counter.total == costs.cost_tfc(b, c_in, c_out, t, h, w).flops

        with count_muls() as counter:
            top.rdw(v, DepthwiseTemporalKernel.init(c_in, k))
        assert counter.total == costs.cost_rdw(b, c_in, t, h, w, k).flops


class TestNetworkCosts:
    @pytest.mark.parametrize("kind", ["tsn", "v3d", "v3d_depthwise"])
    def test_params_match_built_network(self, kind):
        spec = mini_spec(kind)
        report = costs.cost_network(spec, batch=2, height=32, width=32)
        net = build_network(spec, seed=0)
        assert report.total_params == net.param_count()

    def test_params_match_with_tfc(self):
        spec = place_tfc_blocks(mini_spec("v3d"), "v3d")
        report = costs.cost_network(spec, batch=1, height=32, width=32)
        assert report.total_params == build_network(spec, seed=1).param_count()

    def test_tfc_insertion_param_delta(self):
        base = mini_spec("v3d")
        with_tfc = place_tfc_blocks(base, "v3d")
        d_params, d_flops = costs.cost_network(with_tfc, 1, 32, 32).diff(
            costs.cost_network(base, 1, 32, 32))
        t2 = base.temporal_length ** 2
        expected = sum(b.tfc_branch_channels * t2
                       for stage_new, stage_old in zip(with_tfc.stages, base.stages)
                       for b, bo in zip(stage_new, stage_old) if b.tfc and not bo.tfc)
        assert d_params == expected
        assert d_flops > 0

    def test_tsn_vs_v3d_flop_gap(self):
        """The gap decomposes into first-kernel swaps plus the head change."""
        tsn = mini_spec("tsn")
        v3d = mini_spec("v3d")
        d_params, d_flops = costs.cost_network(v3d, 1, 32, 32).diff(
            costs.cost_network(tsn, 1, 32, 32))
        # stage resolutions for 32px input: stem/2 -> 16, then strides 1,2,2,2
        res = {0: 16, 1: 8, 2: 4, 3: 2}
        t = tsn.temporal_length
        exp_flops = 0
        exp_params = 0
        for si in (2, 3):
            h = res[si - 1]  # block input resolution (stride sits on conv2)
            for bi, b in enumerate(v3d.stages[si]):
                hw = (h if bi == 0 else res[si]) ** 2
                conv1x1 = b.mid_channels * b.in_channels
                temporal = b.mid_channels * b.in_channels * 3
                exp_flops += (temporal - conv1x1) * hw * t
                exp_params += temporal - conv1x1
        # heads: per-frame scoring costs T times the pooled head
        c_feat = tsn.stages[-1][-1].out_channels
        exp_flops -= (t - 1) * c_feat * tsn.num_classes
        assert d_params == exp_params
        assert d_flops == exp_flops

    def test_totals_are_sums(self):
        report = costs.cost_network(mini_spec("v3d"), 2, 32, 32)
        assert report.total_params == sum(i.params for i in report.items)
        assert report.total_flops == sum(i.flops for i in report.items)

    def test_report_serialization(self):
        report = costs.operator_comparison(1, 16, 8, 8, 2, 2, 3)
        text = report.format_table()
        assert "temporal_conv" in text and "TOTAL" in text
        import json
        payload = json.loads(report.to_json())
        assert payload["total_params"] == report.total_params
