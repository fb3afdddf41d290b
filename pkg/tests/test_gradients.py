"""Finite-difference gradient checks for every learnable operation of the
fusion, enhancement and decoding modules, at 64-bit precision on tiny inputs.

Each check builds a scalar loss (a fixed random weighting of the op's output)
and compares autograd parameter gradients against central differences,
requiring relative error below 1e-4.
"""

import torch

from oracles import check_gradients
from ovvss.encoders import FeaturePyramid, PoolingEnhancer
from ovvss.rfe import RandomPyramidCollapse, RegionPooler, TargetEnhancer
from ovvss.stcf import (
    AffinityAggregator,
    AuxiliaryHead,
    ClipFuser,
    CrossScaleCollapse,
    TemporalProjector,
    pairwise_attention,
)
from ovvss.vte import (
    CostVolumeRefiner,
    DecodeHead,
    PositionFuser,
    TextRefiner,
    build_cost_volume,
)

RTOL = 1e-4


def weighted_sum(t, seed=0):
    g = torch.Generator().manual_seed(seed)
    w = torch.rand(t.shape, generator=g, dtype=torch.float64)
    return (t * w).sum()


def run_param_check(module, loss_fn):
    params = [p for p in module.parameters()]
    assert params, "module has no learnable parameters"
    worst = check_gradients(loss_fn, params, rtol=RTOL)
    assert worst < RTOL


class TestStcfGradients:
    def test_project_qkv(self):
        torch.manual_seed(0)
        proj = TemporalProjector(3, attn_dim=2).double()
        u = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        d = torch.rand(1, 3, 2, 2, dtype=torch.float64)

        def loss():
            q, k, v = proj(u, d)
            return weighted_sum(q, 1) + weighted_sum(k, 2) + weighted_sum(v, 3)

        run_param_check(proj, loss)

    def test_pairwise_attention_input_gradients(self):
        torch.manual_seed(1)
        q = torch.rand(1, 4, 3, dtype=torch.float64, requires_grad=True)
        k = torch.rand(1, 4, 3, dtype=torch.float64, requires_grad=True)
        v = torch.rand(1, 4, 2, dtype=torch.float64, requires_grad=True)

        def loss():
            a, n = pairwise_attention(q, k, v)
            return weighted_sum(a, 4) + weighted_sum(n, 5)

        assert check_gradients(loss, [q, k, v], rtol=RTOL) < RTOL

    def test_aggregate_affinities_l2(self):
        torch.manual_seed(2)
        agg = AffinityAggregator(2).double()
        with torch.no_grad():  # move off the identity init
            agg.convs[0].weight.add_(0.2 * torch.randn(1, 1, 3, 3, dtype=torch.float64))
            agg.convs[0].bias.add_(0.05)
        a1 = torch.softmax(torch.randn(1, 16, 16, dtype=torch.float64), dim=-1)
        a2 = torch.softmax(torch.randn(1, 4, 4, dtype=torch.float64), dim=-1)

        def loss():
            out = agg([a1, a2], [(4, 4), (2, 2)])
            return weighted_sum(out[0], 6)

        run_param_check(agg, loss)

    def test_aggregate_affinities_dense_mode(self):
        torch.manual_seed(3)
        agg = AffinityAggregator(2, mode="dense", level_tokens=[4, 1]).double()
        with torch.no_grad():
            agg.convs[0].weight.add_(0.2 * torch.randn(4, 4, 1, 1, dtype=torch.float64))
        a1 = torch.softmax(torch.randn(1, 4, 4, dtype=torch.float64), dim=-1)
        a2 = torch.rand(1, 1, 1, dtype=torch.float64)

        def loss():
            return weighted_sum(agg([a1, a2], [(2, 2), (1, 1)])[0], 7)

        run_param_check(agg, loss)

    def test_cross_scale_collapse(self):
        torch.manual_seed(4)
        col = CrossScaleCollapse((2, 3), 2).double()
        xs = [torch.rand(1, 2, 2, 2, dtype=torch.float64),
              torch.rand(1, 3, 1, 1, dtype=torch.float64)]
        run_param_check(col, lambda: weighted_sum(col(xs), 8))

    def test_auxiliary_head(self):
        torch.manual_seed(5)
        head = AuxiliaryHead(3, 2).double()
        x = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        run_param_check(head, lambda: weighted_sum(head(x), 9))

    def test_full_fuser_end_to_end(self):
        torch.manual_seed(6)
        fuser = ClipFuser(channels=(2, 3), out_dim=2).double()
        with torch.no_grad():
            fuser.aggregator.convs[0].weight.add_(
                0.2 * torch.randn(1, 1, 3, 3, dtype=torch.float64)
            )
        g = torch.Generator().manual_seed(7)
        pyrs = [
            FeaturePyramid([
                torch.rand(1, 2, 2, 2, generator=g, dtype=torch.float64),
                torch.rand(1, 3, 1, 1, generator=g, dtype=torch.float64),
            ])
            for _ in range(3)
        ]
        enhanced = FeaturePyramid([
            torch.rand(1, 2, 2, 2, generator=g, dtype=torch.float64),
            torch.rand(1, 3, 1, 1, generator=g, dtype=torch.float64),
        ])
        run_param_check(fuser, lambda: weighted_sum(fuser(pyrs, enhanced).fused, 10))


class TestRfeGradients:
    def test_collapse_random_pyramid(self):
        torch.manual_seed(7)
        col = RandomPyramidCollapse(channels=(2, 3), dim=2, min_level=1).double()
        pyr = FeaturePyramid([
            torch.rand(1, 2, 2, 2, dtype=torch.float64),
            torch.rand(1, 3, 1, 1, dtype=torch.float64),
        ])
        run_param_check(col, lambda: weighted_sum(col(pyr), 11))

    def test_region_pool(self):
        torch.manual_seed(8)
        pool = RegionPooler(3, regions=2).double()
        d = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        run_param_check(pool, lambda: weighted_sum(pool(d), 12))

    def test_enhance_target(self):
        torch.manual_seed(9)
        enh = TargetEnhancer(4, heads=2).double()
        with torch.no_grad():
            enh.attn.out_proj.weight.normal_(std=0.3)
        o = torch.rand(1, 4, 2, 2, dtype=torch.float64)
        regions = torch.rand(1, 2, 4, dtype=torch.float64)
        run_param_check(enh, lambda: weighted_sum(enh(o, regions), 13))


class TestVteGradients:
    def test_refine_text(self):
        torch.manual_seed(10)
        ref = TextRefiner(4, heads=2, mode="mhsa+ffn").double()
        with torch.no_grad():
            ref.attn.out_proj.weight.normal_(std=0.3)
            ref.ffn[-1].weight.normal_(std=0.3)
        text = torch.rand(2, 4, dtype=torch.float64)
        vis = torch.rand(1, 4, 4, dtype=torch.float64)
        run_param_check(ref, lambda: weighted_sum(ref(text, vis), 14))

    def test_build_cost_volume_input_gradients(self):
        torch.manual_seed(11)
        text = torch.rand(2, 3, dtype=torch.float64, requires_grad=True)
        vis = torch.rand(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)

        def loss():
            x, _ = build_cost_volume(text, vis)
            return weighted_sum(x, 15)

        assert check_gradients(loss, [text, vis], rtol=RTOL) < RTOL

    def test_refine_cost_volume(self):
        torch.manual_seed(12)
        ref = CostVolumeRefiner(hidden=2, depth=2).double()
        x = torch.rand(1, 2, 3, 3, dtype=torch.float64)
        run_param_check(ref, lambda: weighted_sum(ref(x), 16))

    def test_fuse_position(self):
        torch.manual_seed(13)
        fuse = PositionFuser(pos_in=2, out_channels=2).double()
        x = torch.rand(1, 2, 2, 2, dtype=torch.float64)
        u = torch.rand(1, 2, 2, 2, dtype=torch.float64)
        run_param_check(fuse, lambda: weighted_sum(fuse(x, u), 17))

    def test_decode_head_both_fusions(self):
        for i, fusion in enumerate(("concat", "add")):
            torch.manual_seed(14 + i)
            head = DecodeHead(slice_channels=2, feat_dim=2, hidden=2, fusion=fusion).double()
            x_hat = torch.rand(1, 2, 2, 2, 2, dtype=torch.float64)
            o = torch.rand(1, 2, 2, 2, dtype=torch.float64)
            run_param_check(head, lambda: weighted_sum(head(x_hat, o), 18 + i))


class TestEncoderGradients:
    def test_pool_enhance(self):
        torch.manual_seed(16)
        pe = PoolingEnhancer(2, ratios=(1, 2)).double()
        x = torch.rand(1, 2, 4, 4, dtype=torch.float64)
        run_param_check(pe, lambda: weighted_sum(pe(x), 20))
