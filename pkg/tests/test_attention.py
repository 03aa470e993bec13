"""Dual-attention branch tests: tokenization, blocks, encode/decode."""

import numpy as np
import pytest

from ssmae import seeds
from ssmae.attention import (
    BAND,
    GRID2D,
    LINE1D,
    PIXEL,
    SPATIAL,
    SPECTRAL,
    BlockParams,
    BranchParams,
    TokenBatch,
    TransformerConfig,
    attention_block,
    decode,
    encode,
    positional_embedding,
    tokenize_spatial,
    tokenize_spectral,
)
from ssmae.errors import ConfigError, ContractError
from ssmae.masking import MaskSpec, apply_spatial_mask, apply_spectral_mask, sample_mask
from ssmae.tensor import Tensor, mse_masked


def micro_cfg(channels=5, patch=3, d=8, blocks=1, heads=2):
    return TransformerConfig(channels=channels, patch_size=patch, token_dim=d, blocks=blocks, heads=heads)


def make_branch(cfg, kind, seed=0):
    return BranchParams.init(cfg, kind, seeds.generator(seed))


def empty_spec(mode, total):
    return MaskSpec(mode=mode, total_units=total, masked=(), seed=0, protected=frozenset())


def zero_block(block: BlockParams) -> None:
    for lin in (block.wq, block.wk, block.wv, block.ffn_in, block.ffn_out):
        lin.w.data[...] = 0.0
        if lin.b is not None:
            lin.b.data[...] = 0.0


class TestPositionalEmbedding:
    def test_rows_distinct(self):
        table = positional_embedding(GRID2D, 49, 16)
        assert table.shape == (49, 16)
        for i in range(49):
            for j in range(i + 1, 49):
                assert not np.allclose(table[i], table[j])

    def test_deterministic(self):
        a = positional_embedding(LINE1D, 30, 12)
        b = positional_embedding(LINE1D, 30, 12)
        assert np.array_equal(a, b)

    def test_grid_transposed_positions_differ(self):
        side = 5
        table = positional_embedding(GRID2D, side * side, 8)
        for r in range(side):
            for c in range(side):
                if r != c:
                    assert not np.allclose(table[r * side + c], table[c * side + r])

    def test_dim_constraints(self):
        with pytest.raises(ConfigError):
            positional_embedding(LINE1D, 4, 7)
        with pytest.raises(ConfigError):
            positional_embedding(GRID2D, 16, 6)
        with pytest.raises(ConfigError):
            positional_embedding(GRID2D, 15, 8)


class TestTokenize:
    def test_spatial_full_patch_token_count(self):
        # 7x7 patch, 34 channels -> 49 tokens of the configured dim
        cfg = TransformerConfig(channels=34, patch_size=7, token_dim=16, blocks=1, heads=2)
        branch = make_branch(cfg, SPATIAL)
        image = seeds.generator(1).normal(size=(34, 7, 7))
        tokens = tokenize_spatial(apply_spatial_mask(image, empty_spec(SPATIAL, 49)), branch)
        assert tokens.count == 49
        assert tokens.tokens.shape == (49, 16)
        assert tokens.origin == PIXEL

    def test_spatial_single_visible(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        image = seeds.generator(2).normal(size=(5, 3, 3))
        spec = MaskSpec(mode=SPATIAL, total_units=9, masked=tuple(range(1, 9)), seed=0, protected=frozenset())
        tokens = tokenize_spatial(apply_spatial_mask(image, spec), branch)
        assert tokens.count == 1
        assert tokens.unit_ids == (0,)

    def test_zero_input_tokens_equal_position_rows(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        branch.embed.b.data[...] = 0.0
        image = np.zeros((5, 3, 3))
        tokens = tokenize_spatial(apply_spatial_mask(image, empty_spec(SPATIAL, 9)), branch)
        assert np.allclose(tokens.tokens.data, branch.pos, atol=1e-15)

    def test_spectral_counts(self):
        cfg = TransformerConfig(channels=34, patch_size=7, token_dim=16, blocks=1, heads=2)
        branch = make_branch(cfg, SPECTRAL)
        image = seeds.generator(3).normal(size=(34, 7, 7))
        tokens = tokenize_spectral(apply_spectral_mask(image, empty_spec(SPECTRAL, 34)), branch)
        assert tokens.count == 34
        assert tokens.origin == BAND
        # ratio 0.5 over 30 eligible (4 protected) -> 15 masked -> 19 visible
        spec = sample_mask(34, 0.5, seed=4, protected=(0, 1, 2, 3), mode=SPECTRAL)
        tokens = tokenize_spectral(apply_spectral_mask(image, spec), branch)
        assert tokens.count == 19

    def test_spectral_single_band_raw_dim(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPECTRAL)
        image = seeds.generator(5).normal(size=(5, 3, 3))
        spec = MaskSpec(mode=SPECTRAL, total_units=5, masked=(1, 2, 3, 4), seed=0, protected=frozenset())
        masked = apply_spectral_mask(image, spec)
        assert masked.visible.shape == (1, 9)  # one band of P*P raw values
        assert tokenize_spectral(masked, branch).count == 1

    def test_mode_mismatch_rejected(self):
        cfg = micro_cfg()
        spa = make_branch(cfg, SPATIAL)
        image = np.zeros((5, 3, 3))
        masked = apply_spectral_mask(image, empty_spec(SPECTRAL, 5))
        with pytest.raises(ContractError):
            tokenize_spatial(masked, spa)

    def test_fully_masked_rejected(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        spec = MaskSpec(mode=SPATIAL, total_units=9, masked=tuple(range(9)), seed=0, protected=frozenset())
        with pytest.raises(ContractError):
            tokenize_spatial(apply_spatial_mask(np.zeros((5, 3, 3)), spec), branch)


class TestAttentionBlock:
    def test_single_token_output_is_value_plus_residual(self):
        rng = seeds.generator(6)
        block = BlockParams.init(8, 2, rng)
        block.ffn_in.w.data[...] = 0.0
        block.ffn_in.b.data[...] = 0.0
        block.ffn_out.w.data[...] = 0.0
        block.ffn_out.b.data[...] = 0.0
        x = TokenBatch(Tensor(rng.normal(size=(1, 8))), PIXEL, (0,))
        out = attention_block(x, block, heads=2)
        value = x.tokens.data @ block.wv.w.data.T + block.wv.b.data
        assert np.allclose(out.tokens.data, value + x.tokens.data, atol=1e-12)

    def test_two_tokens_uniform_attention(self):
        rng = seeds.generator(7)
        block = BlockParams.init(8, 2, rng)
        block.ffn_in.w.data[...] = 0.0
        block.ffn_out.w.data[...] = 0.0
        block.wk.w.data[...] = 0.0  # all keys identical -> uniform attention
        x = TokenBatch(Tensor(rng.normal(size=(2, 8))), PIXEL, (0, 1))
        out = attention_block(x, block, heads=2)
        values = x.tokens.data @ block.wv.w.data.T + block.wv.b.data
        expected = values.mean(axis=0, keepdims=True) + x.tokens.data
        assert np.allclose(out.tokens.data, expected, atol=1e-12)

    def test_huge_alpha_flattens_attention(self):
        rng = seeds.generator(8)
        block = BlockParams.init(8, 2, rng)
        block.alpha_log.data[...] = 30.0  # alpha = e^30 crushes the logits
        x = TokenBatch(Tensor(rng.normal(size=(5, 8)) * 3), PIXEL, tuple(range(5)))
        maps: list[np.ndarray] = []
        attention_block(x, block, heads=2, capture=maps)
        for attn in maps:
            assert np.allclose(attn, 1.0 / 5.0, atol=1e-10)

    def test_attention_weights_sum_to_one(self):
        rng = seeds.generator(9)
        for trial in range(20):
            n = int(rng.integers(1, 9))
            block = BlockParams.init(8, 2, rng)
            x = TokenBatch(Tensor(rng.normal(size=(n, 8)) * 2), PIXEL, tuple(range(n)))
            maps: list[np.ndarray] = []
            attention_block(x, block, heads=2, capture=maps)
            assert len(maps) == 2
            for attn in maps:
                assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_parameters_make_identity_block(self):
        rng = seeds.generator(10)
        block = BlockParams.init(6, 2, rng)
        zero_block(block)
        x = TokenBatch(Tensor(rng.normal(size=(4, 6))), PIXEL, tuple(range(4)))
        out = attention_block(x, block, heads=2)
        assert np.allclose(out.tokens.data, x.tokens.data, atol=1e-15)


class TestEncode:
    def test_zero_blocks_is_identity(self):
        cfg = micro_cfg(blocks=0)
        branch = make_branch(cfg, SPATIAL)
        image = seeds.generator(11).normal(size=(5, 3, 3))
        tokens = tokenize_spatial(apply_spatial_mask(image, empty_spec(SPATIAL, 9)), branch)
        out = encode(tokens, cfg, branch)
        assert np.array_equal(out.tokens.data, tokens.tokens.data)

    def test_token_count_preserved(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        image = seeds.generator(12).normal(size=(5, 3, 3))
        for ratio in (0.2, 0.5, 0.8):
            spec = sample_mask(9, ratio, seed=13, mode=SPATIAL)
            tokens = tokenize_spatial(apply_spatial_mask(image, spec), branch)
            out = encode(tokens, cfg, branch)
            assert out.count == tokens.count
            assert out.unit_ids == tokens.unit_ids

    def test_permutation_equivariance_without_positions(self):
        rng = seeds.generator(14)
        cfg = micro_cfg(blocks=2)
        branch = make_branch(cfg, SPATIAL)
        tokens = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        base = encode(TokenBatch(Tensor(tokens), PIXEL, tuple(range(6))), cfg, branch)
        permuted = encode(TokenBatch(Tensor(tokens[perm]), PIXEL, tuple(range(6))), cfg, branch)
        assert np.allclose(base.tokens.data[perm], permuted.tokens.data, atol=1e-12)


class TestDecode:
    def test_output_shape_both_branches(self):
        cfg = micro_cfg()
        image = seeds.generator(15).normal(size=(5, 3, 3))
        for kind, total, tokenize, applier, mode in (
            (SPATIAL, 9, tokenize_spatial, apply_spatial_mask, SPATIAL),
            (SPECTRAL, 5, tokenize_spectral, apply_spectral_mask, SPECTRAL),
        ):
            branch = make_branch(cfg, kind)
            spec = sample_mask(total, 0.4, seed=16, mode=mode)
            out = decode(encode(tokenize(applier(image, spec), branch), cfg, branch), spec, cfg, branch)
            assert out.shape == (5, 3, 3)

    def test_zero_masked_units_still_reconstructs(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        image = seeds.generator(17).normal(size=(5, 3, 3))
        spec = empty_spec(SPATIAL, 9)
        out = decode(encode(tokenize_spatial(apply_spatial_mask(image, spec), branch), cfg, branch), spec, cfg, branch)
        assert out.shape == (5, 3, 3)
        assert np.isfinite(out.data).all()

    def test_mask_token_receives_gradient(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        image = Tensor(seeds.generator(18).normal(size=(5, 3, 3)))
        spec = sample_mask(9, 0.5, seed=19, mode=SPATIAL)
        recon = decode(encode(tokenize_spatial(apply_spatial_mask(image, spec), branch), cfg, branch), spec, cfg, branch)
        mse_masked(recon, image, spec.element_mask((5, 3, 3))).backward()
        assert branch.mask_token.grad is not None
        assert np.abs(branch.mask_token.grad).max() > 0

    def test_reconstruction_independent_of_masked_values(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        rng = seeds.generator(20)
        image = rng.normal(size=(5, 3, 3))
        spec = sample_mask(9, 0.5, seed=21, mode=SPATIAL)

        def reconstruct(img):
            tokens = tokenize_spatial(apply_spatial_mask(img, spec), branch)
            return decode(encode(tokens, cfg, branch), spec, cfg, branch).data

        tampered = image.copy()
        tampered.reshape(5, 9)[:, list(spec.masked)] += rng.normal(size=(5, len(spec.masked))) * 10
        assert np.array_equal(reconstruct(image), reconstruct(tampered))

    def test_inconsistent_unit_ids_rejected(self):
        cfg = micro_cfg()
        branch = make_branch(cfg, SPATIAL)
        spec = sample_mask(9, 0.5, seed=22, mode=SPATIAL)
        bad = TokenBatch(Tensor(np.zeros((3, 8))), PIXEL, (0, 1, 2))
        if spec.visible[:3] == (0, 1, 2) and len(spec.visible) == 3:
            pytest.skip("degenerate draw")
        with pytest.raises(ContractError):
            decode(bad, spec, cfg, branch)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            TransformerConfig(channels=5, token_dim=10, heads=4)
