import numpy as np
import pytest
import torch

from hiercrop.models.msi import (
    MsiEncoder,
    MsiEncoderConfig,
    PatchEmbed3d,
    PatchMerge3d,
    SwinBlock3d,
    reshape_skip,
    window_partition,
    window_reverse,
)

from modelutil import (
    finite_difference_gradients,
    global_masked_attention,
    max_relative_error,
    shifted_window_membership,
    tiny_msi_config,
)


def make_block(grid, window, shifted, dim=6, heads=2, seed=0):
    torch.manual_seed(seed)
    return SwinBlock3d(
        dim, heads, grid, window, shifted, mlp_ratio=1.0, use_rel_pos=False
    ).double()


def run_oracle(block, x):
    """Grid output of brute-force masked global attention, cell by cell."""
    t, h, w, c = x.shape[1:]
    tokens = x.reshape(1, t * h * w, c)[0]
    allowed = shifted_window_membership((t, h, w), block.window, block.shift)
    out = global_masked_attention(block.attn, tokens, allowed)
    return out.reshape(1, t, h, w, c)


class TestWindowPartition:
    def test_roundtrip(self):
        x = torch.randn(2, 4, 6, 6, 5)
        win = (2, 3, 3)
        assert torch.equal(window_reverse(window_partition(x, win), win, (4, 6, 6)), x)


class TestWindowAttention:
    def test_single_window_equals_global_attention(self):
        block = make_block(grid=(2, 4, 4), window=(2, 4, 4), shifted=False)
        x = torch.randn(1, 2, 4, 4, 6, dtype=torch.float64)
        got = block.window_attention(x)
        want = run_oracle(block, x)  # single window: mask allows everything
        assert (got - want).abs().max() < 1e-10

    def test_identical_tokens_uniform_softmax(self):
        block = make_block(grid=(2, 4, 4), window=(2, 2, 2), shifted=False)
        x = torch.ones(1, 2, 4, 4, 6, dtype=torch.float64) * 0.37
        got = block.window_attention(x)
        # every output token is the projected value of the shared token
        token = x[0, 0, 0, 0]
        qkv = block.attn.qkv(token)
        v = qkv[12:]
        want = block.attn.proj(v)
        assert torch.allclose(got, want.expand_as(got), atol=1e-12)

    def test_two_window_temporal_equals_block_diagonal_mask(self):
        block = make_block(grid=(4, 1, 1), window=(2, 1, 1), shifted=False)
        x = torch.randn(1, 4, 1, 1, 6, dtype=torch.float64)
        got = block.window_attention(x)
        want = run_oracle(block, x)
        assert (got - want).abs().max() < 1e-10

    def test_shifted_equals_bruteforce_masked_global(self):
        block = make_block(grid=(2, 8, 8), window=(2, 4, 4), shifted=True)
        assert block.shift == (0, 2, 2)  # temporal axis is a single window
        x = torch.randn(1, 2, 8, 8, 6, dtype=torch.float64)
        got = block.window_attention(x)
        want = run_oracle(block, x)
        assert (got - want).abs().max() < 1e-8

    def test_shifted_with_temporal_shift(self):
        block = make_block(grid=(4, 4, 4), window=(2, 2, 2), shifted=True)
        assert block.shift == (1, 1, 1)
        x = torch.randn(1, 4, 4, 4, 6, dtype=torch.float64)
        got = block.window_attention(x)
        want = run_oracle(block, x)
        assert (got - want).abs().max() < 1e-8

    def test_padded_grid_matches_oracle(self):
        # 5x5 grid pads to 8x8; padded cells must not leak into real ones
        block = make_block(grid=(2, 5, 5), window=(2, 4, 4), shifted=True)
        x = torch.randn(1, 2, 5, 5, 6, dtype=torch.float64)
        got = block.window_attention(x)
        want = run_oracle_padded(block, x)
        assert (got - want).abs().max() < 1e-8

    def test_window_clamped_to_grid(self, caplog):
        with caplog.at_level("WARNING"):
            block = make_block(grid=(1, 2, 2), window=(2, 7, 7), shifted=False)
        assert block.window == (1, 2, 2)
        assert "clamped" in caplog.text


def run_oracle_padded(block, x):
    """Oracle for padded grids: zero-pad, enumerate groups, pads isolated."""
    t, h, w, c = x.shape[1:]
    pt, ph, pw = block.padded
    full = torch.zeros(1, pt, ph, pw, c, dtype=x.dtype)
    full[:, :t, :h, :w] = x
    tokens = full.reshape(1, pt * ph * pw, c)[0]
    allowed = shifted_window_membership((pt, ph, pw), block.window, block.shift)
    # cut all pairs touching a padded cell (pads keep their self-pair)
    real = torch.zeros(pt, ph, pw, dtype=torch.bool)
    real[:t, :h, :w] = True
    real = real.reshape(-1)
    pair_real = real[:, None] & real[None, :]
    eye = torch.eye(len(real), dtype=torch.bool)
    out = global_masked_attention(block.attn, tokens, (allowed & pair_real) | eye)
    return out.reshape(1, pt, ph, pw, c)[:, :t, :h, :w]


class TestPatchEmbed:
    def test_stride_arithmetic_from_paper_dims(self):
        torch.manual_seed(0)
        cfg = MsiEncoderConfig(
            bands=10, months=12, image_size=(192, 192), patch_t=2, patch_s=4, base_dim=4,
            depths=(2, 2, 2, 2), heads=(1, 1, 1, 1),
        )
        embed = PatchEmbed3d(cfg)
        out = embed(torch.rand(1, 12, 192, 192, 10))
        assert out.shape == (1, 6, 48, 48, 4)

    def test_all_zero_gives_bias(self):
        torch.manual_seed(0)
        cfg = tiny_msi_config()
        embed = PatchEmbed3d(cfg).double()
        out = embed(torch.zeros(1, 4, 8, 8, 3, dtype=torch.float64))
        assert torch.allclose(out, embed.proj.bias.expand_as(out))

    def test_locality_of_patches(self):
        torch.manual_seed(1)
        cfg = tiny_msi_config()
        embed = PatchEmbed3d(cfg).double()
        a = torch.rand(1, 4, 8, 8, 3, dtype=torch.float64)
        b = a.clone()
        b[0, 0:2, 3, 5] += 1.0  # inside temporal patch 0, spatial cell (3, 5)
        diff = (embed(a) - embed(b)).abs().sum(dim=-1)[0]
        changed = torch.nonzero(diff > 1e-12)
        assert changed.tolist() == [[0, 3, 5]]

    def test_odd_months_padded_by_repeat(self):
        torch.manual_seed(2)
        cfg = MsiEncoderConfig(
            bands=3, months=3, image_size=(8, 8), patch_t=2, patch_s=1, base_dim=2,
            depths=(2, 2, 2, 2), heads=(1, 1, 2, 2),
        )
        embed = PatchEmbed3d(cfg).double()
        x = torch.rand(1, 3, 8, 8, 3, dtype=torch.float64)
        x_rep = torch.cat([x, x[:, -1:]], dim=1)
        assert torch.allclose(embed(x), embed(x_rep))

    def test_rejects_nonfinite(self):
        embed = PatchEmbed3d(tiny_msi_config())
        with pytest.raises(ValueError, match="finite"):
            embed(torch.full((1, 4, 8, 8, 3), float("inf")))


class TestPatchMerge:
    def test_halving_shapes(self):
        torch.manual_seed(0)
        merge = PatchMerge3d(4, t_in=6)
        assert merge(torch.randn(1, 6, 48, 48, 4)).shape == (1, 3, 24, 24, 8)

    def test_temporal_clamp(self):
        torch.manual_seed(0)
        merge = PatchMerge3d(8, t_in=1)
        assert merge(torch.randn(1, 1, 24, 24, 8)).shape == (1, 1, 12, 12, 16)

    def test_odd_temporal_pads(self):
        torch.manual_seed(0)
        merge = PatchMerge3d(4, t_in=3)
        assert merge(torch.randn(1, 3, 8, 8, 4)).shape == (1, 2, 4, 4, 8)

    def test_constant_stays_constant(self):
        torch.manual_seed(0)
        merge = PatchMerge3d(4, t_in=2).double()
        out = merge(torch.full((1, 2, 8, 8, 4), 1.3, dtype=torch.float64))
        assert torch.allclose(out, out[:, :1, :1, :1].expand_as(out), atol=1e-10)

    def test_odd_spatial_rejected(self):
        merge = PatchMerge3d(4, t_in=2)
        with pytest.raises(ValueError, match="odd"):
            merge(torch.randn(1, 2, 5, 8, 4))


class TestReshapeSkip:
    def test_channel_arithmetic(self):
        x = torch.randn(1, 3, 24, 24, 8)
        assert reshape_skip(x).shape == (1, 24, 24, 24)

    def test_single_frame_is_squeeze(self):
        x = torch.randn(1, 1, 6, 6, 8)
        assert torch.equal(reshape_skip(x), x[:, 0])

    def test_multiset_preserved(self):
        x = torch.randn(1, 3, 4, 4, 5)
        out = reshape_skip(x)
        assert torch.equal(torch.sort(out.flatten()).values, torch.sort(x.flatten()).values)


class TestEncoder:
    def test_stage_dims_contract(self):
        cfg = tiny_msi_config()
        dims = cfg.stage_dims()
        assert dims == [(2, 8, 8, 2), (1, 4, 4, 4), (1, 2, 2, 8), (1, 1, 1, 16)]

    def test_paper_dim_stage_chain(self):
        # temporal clamp chain with monthly data: 6 -> 3 -> 2 -> 1
        cfg = MsiEncoderConfig(
            bands=10, months=12, image_size=(192, 192), patch_t=2, patch_s=4, base_dim=4,
            depths=(2, 2, 2, 2), heads=(1, 1, 1, 1),
        )
        dims = cfg.stage_dims()
        assert [d[0] for d in dims] == [6, 3, 2, 1]
        assert dims[3] == (1, 6, 6, 32)  # 8 * base_dim channels

    def test_encode_shapes_and_x4(self):
        torch.manual_seed(0)
        enc = MsiEncoder(tiny_msi_config())
        stages = enc.encode(torch.rand(1, 4, 8, 8, 3))
        for (t, h, w, c), f, x in zip(
            enc.cfg.stage_dims(), stages.inputs, stages.outputs
        ):
            assert f.shape == (1, t, h, w, c)
            assert x.shape == (1, t, h, w, c)

    def test_forward_shape(self):
        torch.manual_seed(0)
        enc = MsiEncoder(tiny_msi_config())
        out = enc(torch.rand(2, 4, 8, 8, 3))
        assert out.shape == (2, 8, 8, 4)

    def test_determinism(self):
        torch.manual_seed(0)
        enc = MsiEncoder(tiny_msi_config()).double()
        x = torch.rand(1, 4, 8, 8, 3, dtype=torch.float64)
        assert torch.equal(enc(x), enc(x))

    def test_zero_weights_zero_decode(self):
        torch.manual_seed(0)
        enc = MsiEncoder(tiny_msi_config())
        with torch.no_grad():
            enc.head.weight.zero_()
            enc.head.bias.zero_()
            enc.out_proj.weight.zero_()
            enc.out_proj.bias.zero_()
        out = enc(torch.rand(1, 4, 8, 8, 3))
        assert torch.equal(out, torch.zeros_like(out))

    def test_months_do_not_change_spatial_dims(self):
        for months in (2, 3, 4):
            cfg = tiny_msi_config(months=months)
            torch.manual_seed(0)
            enc = MsiEncoder(cfg)
            out = enc(torch.rand(1, months, 8, 8, 3))
            assert out.shape == (1, 8, 8, 4)

    def test_uneven_grid_rejected(self):
        with pytest.raises(ValueError, match="multiple"):
            MsiEncoderConfig(
                bands=3, months=4, image_size=(12, 12), patch_s=1, base_dim=2,
                depths=(2, 2, 2, 2), heads=(1, 1, 2, 2),
            ).validate()

    def test_odd_depths_rejected(self):
        with pytest.raises(ValueError, match="even"):
            MsiEncoderConfig(
                bands=3, months=4, image_size=(8, 8), patch_s=1, base_dim=2,
                depths=(2, 3, 2, 2), heads=(1, 1, 2, 2),
            ).validate()

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        cfg = MsiEncoderConfig(
            bands=2, months=2, image_size=(8, 8), patch_t=1, patch_s=1, base_dim=2,
            depths=(2, 0, 0, 0), heads=(1, 1, 1, 1), window_spatial=2,
            window_temporal=2, mlp_ratio=1.0, out_dim=2, use_rel_pos=False,
        )
        enc = MsiEncoder(cfg).double()
        x = torch.rand(1, 2, 8, 8, 2, dtype=torch.float64)
        weights = torch.randn(1, 8, 8, 2, dtype=torch.float64)
        params = list(enc.parameters())

        def loss_fn():
            return (enc(x) * weights).sum()

        enc.zero_grad()
        loss_fn().backward()
        analytic = [p.grad.clone() for p in params]
        numeric = finite_difference_gradients(loss_fn, params)
        assert max_relative_error(analytic, numeric) < 1e-4
