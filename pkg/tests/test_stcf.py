import numpy as np
import pytest
import torch

from oracles import np_attention, np_upsample_affinity
from ovvss.encoders import FeaturePyramid
from ovvss.stcf import (
    AffinityAggregator,
    AuxiliaryHead,
    ClipFuser,
    CrossScaleCollapse,
    TemporalProjector,
    flatten_map,
    pairwise_attention,
    upsample_affinity,
)


def identity_linear(linear):
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.out_features, linear.in_features))
        linear.bias.zero_()


class TestProjector:
    def test_identity_projection_returns_flattened_input(self):
        torch.manual_seed(0)
        proj = TemporalProjector(3)
        identity_linear(proj.q)
        u = torch.rand(1, 3, 2, 2)
        q, _, _ = proj(u, torch.rand(1, 3, 2, 2))
        assert torch.allclose(q, flatten_map(u))

    def test_zero_past_gives_bias_rows(self):
        torch.manual_seed(0)
        proj = TemporalProjector(3, attn_dim=4)
        u = torch.rand(1, 3, 2, 2)
        _, k, v = proj(u, torch.zeros(1, 3, 2, 2))
        assert torch.allclose(k, proj.k.bias.expand(1, 4, 4))
        assert torch.allclose(v, proj.v.bias.expand(1, 4, 3))

    def test_matches_dense_matmul_oracle(self):
        torch.manual_seed(1)
        proj = TemporalProjector(3, attn_dim=5).double()
        u = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        d = torch.rand(1, 3, 2, 2, dtype=torch.float64)
        q, k, v = proj(u, d)
        uf = u.flatten(2).transpose(1, 2)[0].numpy()
        df = d.flatten(2).transpose(1, 2)[0].numpy()
        wq = proj.q.weight.detach().numpy()
        want_q = uf @ wq.T + proj.q.bias.detach().numpy()
        assert np.allclose(q[0].detach().numpy(), want_q, atol=1e-12)
        want_k = df @ proj.k.weight.detach().numpy().T + proj.k.bias.detach().numpy()
        assert np.allclose(k[0].detach().numpy(), want_k, atol=1e-12)
        want_v = df @ proj.v.weight.detach().numpy().T + proj.v.bias.detach().numpy()
        assert np.allclose(v[0].detach().numpy(), want_v, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        proj = TemporalProjector(3)
        with pytest.raises(ValueError, match="mismatch"):
            proj(torch.rand(1, 3, 2, 2), torch.rand(1, 3, 4, 4))


class TestPairwiseAttention:
    def test_single_key_all_ones_column(self):
        q = torch.rand(1, 4, 3)
        k = torch.rand(1, 1, 3)
        v = torch.rand(1, 1, 2)
        a, n = pairwise_attention(q, k, v)
        assert torch.allclose(a, torch.ones(1, 4, 1))
        assert torch.allclose(n, v.expand(1, 4, 2))

    def test_identical_keys_uniform(self):
        q = torch.rand(1, 3, 2)
        k = torch.rand(1, 1, 2).expand(1, 4, 2)
        v = torch.rand(1, 4, 5)
        a, n = pairwise_attention(q, k, v)
        assert torch.allclose(a, torch.full((1, 3, 4), 0.25), atol=1e-6)
        assert torch.allclose(n, v.mean(dim=1, keepdim=True).expand(1, 3, 5), atol=1e-6)

    def test_two_by_two_hand_oracle(self):
        q = torch.tensor([[[1.0, 2.0], [0.5, -1.0]]], dtype=torch.float64)
        k = torch.tensor([[[0.3, 0.7], [-0.2, 1.1]]], dtype=torch.float64)
        v = torch.tensor([[[2.0, 0.0, 1.0], [1.0, -1.0, 0.5]]], dtype=torch.float64)
        a, n = pairwise_attention(q, k, v)
        a_want, n_want = np_attention(q[0].numpy(), k[0].numpy(), v[0].numpy())
        assert np.allclose(a[0].numpy(), a_want, atol=1e-6)
        assert np.allclose(n[0].numpy(), n_want, atol=1e-6)

    def test_raw_mode_is_bare_product(self):
        q = torch.rand(1, 3, 2)
        k = torch.rand(1, 4, 2)
        v = torch.rand(1, 4, 2)
        a, _ = pairwise_attention(q, k, v, raw=True)
        assert torch.allclose(a, q @ k.transpose(-2, -1))

    def test_rows_sum_to_one(self):
        torch.manual_seed(0)
        a, _ = pairwise_attention(torch.randn(2, 9, 4), torch.randn(2, 9, 4), torch.randn(2, 9, 4))
        assert torch.allclose(a.sum(dim=-1), torch.ones(2, 9), atol=1e-6)
        assert a.min() >= 0 and a.max() <= 1


class TestUpsampleAffinity:
    def test_matches_rank4_oracle(self):
        torch.manual_seed(0)
        a = torch.rand(1, 4, 4, dtype=torch.float64)  # 2x2 grids
        got = upsample_affinity(a, (2, 2), (4, 4))[0].numpy()
        want = np_upsample_affinity(a[0].numpy(), (2, 2), (4, 4))
        assert np.allclose(got, want, atol=1e-10)

    def test_single_source_pixel_constant(self):
        a = torch.full((1, 1, 1), 3.7, dtype=torch.float64)
        got = upsample_affinity(a, (1, 1), (2, 2))
        assert torch.allclose(got, torch.full((1, 4, 4), 3.7, dtype=torch.float64))


class TestAggregator:
    def test_single_scale_passthrough(self):
        agg = AffinityAggregator(1)
        a = torch.rand(1, 4, 4)
        out = agg([a], [(2, 2)])
        assert out[0] is a

    def test_identity_conv_zero_deep_equal_res(self):
        # default init is the identity kernel; zero coarse map, same grids
        agg = AffinityAggregator(2)
        a1 = torch.softmax(torch.randn(1, 4, 4), dim=-1)
        zero = torch.zeros(1, 4, 4)
        out = agg([a1, zero], [(2, 2), (2, 2)])
        assert torch.allclose(out[0], a1, atol=1e-6)
        assert out[1] is zero

    def test_two_scale_oracle_2x2_and_1x1(self):
        agg = AffinityAggregator(2).double()
        a1 = torch.softmax(torch.randn(1, 4, 4, dtype=torch.float64), dim=-1)
        a2 = torch.rand(1, 1, 1, dtype=torch.float64)
        out = agg([a1, a2], [(2, 2), (1, 1)])
        up = np_upsample_affinity(a2[0].numpy(), (1, 1), (2, 2))
        m = np.maximum(up + a1[0].numpy(), 0.0)  # identity conv + relu
        want = m / m.sum(axis=-1, keepdims=True)
        assert np.allclose(out[0][0].detach().numpy(), want, atol=1e-6)
        assert torch.equal(out[1], a2)

    def test_rows_renormalized_after_random_conv(self):
        torch.manual_seed(0)
        agg = AffinityAggregator(2)
        with torch.no_grad():
            agg.convs[0].weight.normal_()
            agg.convs[0].bias.normal_()
        a1 = torch.softmax(torch.randn(2, 16, 16), dim=-1)
        a2 = torch.softmax(torch.randn(2, 4, 4), dim=-1)
        out = agg([a1, a2], [(4, 4), (2, 2)])
        assert torch.allclose(out[0].sum(dim=-1), torch.ones(2, 16), atol=1e-6)
        assert out[0].min() >= 0 and out[0].max() <= 1 + 1e-6

    def test_scale_count_mismatch(self):
        agg = AffinityAggregator(2)
        with pytest.raises(ValueError, match="scales"):
            agg([torch.rand(1, 4, 4)], [(2, 2)])

    def test_dense_mode_identity_init(self):
        agg = AffinityAggregator(2, mode="dense", level_tokens=[4, 1])
        a1 = torch.softmax(torch.randn(1, 4, 4), dim=-1)
        a2 = torch.zeros(1, 1, 1)
        out = agg([a1, a2], [(2, 2), (1, 1)])
        assert torch.allclose(out[0], a1, atol=1e-6)


class TestClipFuser:
    def _pyramid(self, b=1, channels=(3, 5), side=4, dtype=torch.float32, seed=0):
        g = torch.Generator().manual_seed(seed)
        return FeaturePyramid(
            [
                torch.rand(b, c, side // 2**i, side // 2**i, generator=g, dtype=dtype)
                for i, c in enumerate(channels)
            ]
        )

    def test_single_frame_clip_returns_enhanced_features(self):
        torch.manual_seed(0)
        fuser = ClipFuser(channels=(3, 5), out_dim=4)
        pyr = self._pyramid()
        enhanced = self._pyramid(seed=1)
        out = fuser([pyr], enhanced)
        assert out.steps == 0
        for got, want in zip(out.per_scale, enhanced.levels):
            assert torch.equal(got, want)
        assert torch.allclose(out.fused, fuser.collapse(list(enhanced.levels)))

    def test_step_count_matches_past_frames(self):
        torch.manual_seed(0)
        fuser = ClipFuser(channels=(3, 5), out_dim=4)
        pyrs = [self._pyramid(seed=i) for i in range(4)]  # n=3 past + target
        out = fuser(pyrs, self._pyramid(seed=9))
        assert out.steps == 3

    def test_two_identical_frames_single_scale_oracle(self):
        # L=1 degenerates to plain cross-attention fusion
        torch.manual_seed(3)
        fuser = ClipFuser(channels=(4,), out_dim=4).double()
        pyr = self._pyramid(channels=(4,), dtype=torch.float64, seed=5)
        enhanced = self._pyramid(channels=(4,), dtype=torch.float64, seed=6)
        out = fuser([pyr, pyr], enhanced)
        assert out.steps == 1

        proj = fuser.projectors[0]
        u = pyr.levels[0].flatten(2).transpose(1, 2)[0].numpy()
        d = enhanced.levels[0].flatten(2).transpose(1, 2)[0].numpy()
        q = u @ proj.q.weight.detach().numpy().T + proj.q.bias.detach().numpy()
        k = d @ proj.k.weight.detach().numpy().T + proj.k.bias.detach().numpy()
        v = d @ proj.v.weight.detach().numpy().T + proj.v.bias.detach().numpy()
        _, o_want = np_attention(q, k, v)
        got = out.per_scale[0].flatten(2).transpose(1, 2)[0].detach().numpy()
        assert np.allclose(got, o_want, atol=1e-9)

    def test_order_sensitivity(self):
        torch.manual_seed(0)
        fuser = ClipFuser(channels=(3, 5), out_dim=4)
        with torch.no_grad():  # non-degenerate weights: peaked attention
            for proj in fuser.projectors:
                proj.q.weight.mul_(8.0)
                proj.k.weight.mul_(8.0)
        pyrs = [self._pyramid(seed=i) for i in range(3)]
        enhanced = self._pyramid(seed=7)
        fwd = fuser(pyrs, enhanced).fused
        rev = fuser(pyrs[::-1], enhanced).fused
        assert not torch.allclose(fwd, rev, atol=1e-4)

    def test_empty_clip_rejected(self):
        fuser = ClipFuser(channels=(3,), out_dim=2)
        with pytest.raises(ValueError, match="empty"):
            fuser([], None)

    def test_refined_affinities_row_stochastic(self):
        torch.manual_seed(0)
        fuser = ClipFuser(channels=(3, 5), out_dim=4)
        with torch.no_grad():  # perturb the aggregation conv off identity
            fuser.aggregator.convs[0].weight.add_(0.3 * torch.randn(1, 1, 3, 3))
        pyrs = [self._pyramid(seed=i) for i in range(3)]
        out = fuser(pyrs, self._pyramid(seed=8))
        for a in out.affinities:
            assert torch.allclose(a.sum(dim=-1), torch.ones_like(a.sum(dim=-1)), atol=1e-6)
        for b in out.refined:
            assert torch.allclose(b.sum(dim=-1), torch.ones_like(b.sum(dim=-1)), atol=1e-6)


class TestCrossScaleCollapse:
    def test_equal_resolution_sum(self):
        collapse = CrossScaleCollapse((2, 3), 4)
        a = torch.rand(1, 2, 4, 4)
        b = torch.rand(1, 3, 2, 2)
        got = collapse([a, b])
        assert got.shape == (1, 4, 4, 4)


class TestAuxiliaryHead:
    def test_zero_weights_uniform_logits(self):
        head = AuxiliaryHead(4, 3)
        with torch.no_grad():
            head.head.weight.zero_()
            head.head.bias.zero_()
        out = head(torch.rand(1, 4, 2, 2))
        assert torch.all(out == 0)

    def test_hand_matmul_on_single_pixel(self):
        head = AuxiliaryHead(3, 2)
        with torch.no_grad():
            head.head.weight.copy_(torch.tensor([[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]]).view(2, 3, 1, 1))
            head.head.bias.copy_(torch.tensor([0.1, -0.2]))
        x = torch.tensor([1.0, 2.0, 3.0]).view(1, 3, 1, 1)
        out = head(x)[0, :, 0, 0]
        assert torch.allclose(out, torch.tensor([1 + 6 + 0.1, 0.5 - 2 - 0.2]))

    def test_channel_count_tracks_seen_classes(self):
        for s in (1, 2, 7):
            head = AuxiliaryHead(4, s)
            assert head(torch.rand(1, 4, 2, 2)).shape[1] == s
        with pytest.raises(ValueError):
            AuxiliaryHead(4, 0)
