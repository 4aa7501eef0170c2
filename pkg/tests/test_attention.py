import pytest
import torch

from helpers import fd_gradcheck
from uwrestore.attention import (
    ChannelAttention,
    FeatureContextualizer,
    MultiAttentionBlock,
    PyramidPooling,
)
from uwrestore.engine import EngineError


def rand(*shape, seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, dtype=dtype, generator=gen)


class TestChannelAttention:
    def test_rows_sum_to_one(self):
        attn_block = ChannelAttention(6, heads=2)
        x, p = rand(2, 6, 8, 8, seed=1), rand(2, 6, 8, 8, seed=2)
        attn = attn_block.attention_map(p, x)
        assert attn.shape == (2, 2, 6, 6)
        assert torch.allclose(attn.sum(-1), torch.ones(2, 2, 6), atol=1e-6)

    def test_constant_query_gives_uniform_attention(self):
        block = ChannelAttention(5, heads=2)
        with torch.no_grad():
            block.q_proj.weight.zero_()
            block.q_proj.bias.zero_()
            block.q_dw.weight.zero_()
            block.q_dw.bias.zero_()
        x = rand(1, 5, 6, 6, seed=3)
        out, attn = block._attend(rand(1, 5, 6, 6, seed=4), x)
        assert torch.allclose(attn, torch.full_like(attn, 1 / 5), atol=1e-6)
        # uniform rows average the value channels per head
        n, hc = out.shape[0], out.shape[1]
        v = block.v_dw(torch.chunk(block.kv_proj(block.norm_kv(x)), 2, dim=1)[1])
        v = v.view(1, 2, 5, -1)
        expect = v.mean(dim=2, keepdim=True).expand(-1, -1, 5, -1).reshape(out.shape)
        assert torch.allclose(out, expect, atol=1e-6)

    @pytest.mark.parametrize("size", [8, 16, 32])
    def test_attention_map_size_is_spatial_independent(self, size):
        block = ChannelAttention(4, heads=3)
        x = rand(2, 4, size, size, seed=5)
        attn = block.attention_map(x, x)
        assert attn.shape == (2, 3, 4, 4)

    def test_spatial_mismatch_rejected(self):
        block = ChannelAttention(4)
        with pytest.raises(EngineError, match="match"):
            block(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 16, 16))

    def test_output_shape(self):
        block = ChannelAttention(6)
        x = rand(2, 6, 8, 10, seed=6)
        assert block(x, x).shape == x.shape

    def test_self_wiring_equals_cross_wiring_on_same_input(self):
        # the three transformer variants differ only in source wiring
        block = ChannelAttention(4)
        x = rand(1, 4, 8, 8, seed=7)
        assert torch.equal(block(x, x), block(x.clone(), x.clone()))

    def test_temperature_gradient_nonzero(self):
        block = ChannelAttention(4)
        x, p = rand(1, 4, 8, 8, seed=8), rand(1, 4, 8, 8, seed=9)
        block(p, x).square().mean().backward()
        assert block.temperature.grad is not None
        assert block.temperature.grad.abs().sum() > 0

    def test_cross_attention_gradients_reach_both_sources(self):
        block = ChannelAttention(4)
        x = rand(1, 4, 8, 8, seed=10).requires_grad_(True)
        p = rand(1, 4, 8, 8, seed=11).requires_grad_(True)
        block(p, x).square().mean().backward()
        assert x.grad.abs().sum() > 0 and p.grad.abs().sum() > 0

    def test_gradients_match_finite_differences(self):
        block = ChannelAttention(3, heads=2).double()
        x = rand(1, 3, 6, 6, seed=12, dtype=torch.float64).requires_grad_(True)
        p = rand(1, 3, 6, 6, seed=13, dtype=torch.float64).requires_grad_(True)
        proj = rand(1, 3, 6, 6, seed=14, dtype=torch.float64)

        def loss():
            return (block(p, x) * proj).sum()

        leaves = [x, p, block.temperature, block.q_proj.weight, block.kv_proj.weight,
                  block.out_proj.weight, block.ffn.expand.weight]
        fd_gradcheck(loss, leaves, n_coords=3)


class TestMultiAttentionBlock:
    def test_zeroed_fusion_keeps_image_stream(self):
        block = MultiAttentionBlock(4)
        with torch.no_grad():
            block.collapse.proj.weight.zero_()
            block.collapse.proj.bias.zero_()
        x, p = rand(1, 4, 8, 8, seed=15), rand(1, 4, 8, 8, seed=16)
        x_out, _ = block(x, p)
        assert torch.equal(x_out, x)

    def test_chained_blocks_preserve_both_streams(self):
        blocks = [MultiAttentionBlock(4) for _ in range(4)]
        x, p = rand(2, 4, 8, 8, seed=17), rand(2, 4, 8, 8, seed=18)
        for block in blocks:
            x, p = block(x, p)
            assert x.shape == (2, 4, 8, 8) and p.shape == (2, 4, 8, 8)

    def test_gradient_flows_from_image_stream_to_prior(self):
        block = MultiAttentionBlock(4)
        x = rand(1, 4, 8, 8, seed=19)
        p = rand(1, 4, 8, 8, seed=20).requires_grad_(True)
        x_out, _ = block(x, p)
        x_out.square().mean().backward()
        assert p.grad.abs().sum() > 0

    def test_prior_stream_is_kft_output(self):
        block = MultiAttentionBlock(4)
        x, p = rand(1, 4, 8, 8, seed=21), rand(1, 4, 8, 8, seed=22)
        _, p_out = block(x, p)
        assert torch.equal(p_out, block.kft(x, p))

    def test_cross_attention_without_prior_rejected(self):
        block = MultiAttentionBlock(4)
        with pytest.raises(EngineError, match="prior"):
            block(torch.zeros(1, 4, 8, 8), None)

    def test_sat_only_runs_without_prior(self):
        block = MultiAttentionBlock(4, use_act=False, use_kft=False)
        x = rand(1, 4, 8, 8, seed=23)
        x_out, p_out = block(x, None)
        assert x_out.shape == x.shape and p_out is None

    def test_needs_a_transformer(self):
        with pytest.raises(EngineError, match="transformer"):
            MultiAttentionBlock(4, use_act=False, use_kft=False, use_sat=False)


class TestPyramidPooling:
    def test_constant_input_stays_constant(self):
        spp = PyramidPooling(6)
        x = torch.full((1, 6, 16, 16), 0.7)
        out = spp(x)
        flat = out.reshape(out.shape[1], -1)
        assert torch.allclose(flat.std(dim=1), torch.zeros(6), atol=1e-6)

    def test_shape_preserved(self):
        spp = PyramidPooling(8)
        x = rand(2, 8, 16, 16, seed=24)
        assert spp(x).shape == x.shape

    def test_pool_to_one_branch_carries_global_mean(self):
        spp = PyramidPooling(4, sizes=(1,), branch_channels=1)
        with torch.no_grad():
            spp.branches[0].weight.zero_()
            spp.branches[0].weight[0, 2, 0, 0] = 1.0   # select channel 2
            spp.branches[0].bias.zero_()
            spp.fuse.weight.zero_()
            spp.fuse.bias.zero_()
            spp.fuse.weight[0, 4, 0, 0] = 1.0          # expose the branch in output ch 0
        x = rand(1, 4, 8, 8, seed=25)
        out = spp(x)
        assert torch.allclose(out[0, 0], torch.full((8, 8), x[0, 2].mean()), atol=1e-6)

    def test_small_inputs_clamp_pool_sizes(self):
        spp = PyramidPooling(4)
        x = rand(1, 4, 4, 4, seed=26)
        assert spp(x).shape == x.shape


class TestFeatureContextualizer:
    def test_embed_maps_12_to_48(self):
        fc = FeatureContextualizer()
        assert fc.embed.in_channels == 12 and fc.embed.out_channels == 48

    def test_spatial_dims_unchanged(self):
        fc = FeatureContextualizer(in_channels=4, channels=8, blocks=2, heads=2)
        x, p = rand(1, 4, 8, 8, seed=27), rand(1, 8, 8, 8, seed=28)
        assert fc(x, p).shape == (1, 8, 8, 8)

    def test_channel_mismatch_rejected(self):
        fc = FeatureContextualizer(in_channels=4, channels=8, blocks=1)
        with pytest.raises(EngineError, match="channels"):
            fc(torch.zeros(1, 5, 8, 8), torch.zeros(1, 8, 8, 8))

    def test_full_module_gradients(self):
        fc = FeatureContextualizer(in_channels=3, channels=4, blocks=1, heads=2).double()
        x = rand(1, 3, 8, 8, seed=29, dtype=torch.float64).requires_grad_(True)
        p = rand(1, 4, 8, 8, seed=30, dtype=torch.float64).requires_grad_(True)
        proj = rand(1, 4, 8, 8, seed=31, dtype=torch.float64)

        def loss():
            return (fc(x, p) * proj).sum()

        params = [fc.embed.weight, fc.spp.fuse.weight,
                  fc.blocks[0].qconv.w_r, fc.blocks[0].act.q_proj.weight]
        fd_gradcheck(loss, [x, p] + params, n_coords=3)
