import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_attention
from tokensplat.autodiff import Tensor
from tokensplat.backbone import (
    CanonicalBlock, ConfigError, Encoder, ModelConfig, attend, canonical_decode, patch_rays, patchify,
    sincos_pos_embed, unpatchify,
)
from tokensplat.geometry import Intrinsics

SMALL = ModelConfig(patch_size=8, embed_dim=16, encoder_depth=2, decoder_depth=2, heads=2, height=16, width=24)
K_SMALL = Intrinsics.from_fov(24, 16, 60.0)


class TestConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.grid == (4, 4) and cfg.num_tokens == 17

    @pytest.mark.parametrize("bad", [
        {"height": 65}, {"embed_dim": 66}, {"pnv": 1}, {"epsilon": 0.0}, {"k_per_token": 3},
        {"k_per_token": 9}, {"sh_degree": 4}, {"encoder_depth": -1},
    ])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    @pytest.mark.parametrize("depth,taps", [(0, (0, 0, 0, 0)), (4, (0, 2, 3, 4)), (12, (0, 6, 9, 12)),
                                            (2, (0, 1, 2, 2))])
    def test_taps(self, depth, taps):
        assert ModelConfig(decoder_depth=depth).taps() == taps

    def test_dict_round_trip(self):
        assert ModelConfig(**SMALL.to_dict()) == SMALL


class TestPatches:
    def test_counts(self):
        assert patchify(np.zeros((256, 256, 3)), 16).shape == (256, 768)
        assert patchify(np.zeros((32, 32, 3)), 16).shape == (4, 768)

    def test_row_major(self):
        img = np.zeros((4, 6, 3))
        img[0:2, 2:4] = 1.0  # second patch of the first row
        p = patchify(img, 2)
        assert p[1].min() == 1.0 and p[[0, 2, 3, 4, 5]].max() == 0.0

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
    @settings(max_examples=30, deadline=None)
    def test_round_trip(self, gh, gw, p):
        img = np.random.default_rng(gh * 100 + gw * 10 + p).random((2, gh * p, gw * p, 3))
        assert np.array_equal(unpatchify(patchify(img, p), p, gh * p, gw * p), img)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((10, 16, 3)), 4)

    def test_pos_embed_shape_and_distinct(self):
        e = sincos_pos_embed(3, 4, 16)
        assert e.shape == (12, 16)
        assert len({row.tobytes() for row in e}) == 12

    def test_patch_rays_centre(self):
        cfg = ModelConfig(patch_size=8, height=16, width=16)
        rays = patch_rays(cfg, Intrinsics(10.0, 10.0, 8.0, 8.0, 16, 16))
        np.testing.assert_allclose(rays[0], [-0.4, -0.4, 1.0])
        np.testing.assert_allclose(rays[3], [0.4, 0.4, 1.0])


class TestAttention:
    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle_single_head(self, seed):
        r = np.random.default_rng(seed)
        d = int(r.integers(2, 9))
        q, k, v = r.standard_normal((1, 3, d)), r.standard_normal((1, 5, d)), r.standard_normal((1, 5, d))
        out, w = attend(Tensor(q), Tensor(k), Tensor(v), 1, return_weights=True)
        np.testing.assert_allclose(out.data[0], dense_attention(q[0], k[0], v[0]), atol=1e-6)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    def test_multi_head_is_per_head_dense(self):
        r = np.random.default_rng(0)
        q, k, v = r.standard_normal((1, 3, 8)), r.standard_normal((1, 4, 8)), r.standard_normal((1, 4, 8))
        out = attend(Tensor(q), Tensor(k), Tensor(v), 2).data[0]
        ref = np.concatenate([dense_attention(q[0, :, s], k[0, :, s], v[0, :, s])
                              for s in (slice(0, 4), slice(4, 8))], axis=1)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_single_key_returns_value(self):
        r = np.random.default_rng(1)
        v = r.standard_normal((1, 1, 4))
        out = attend(Tensor(r.standard_normal((1, 3, 4))), Tensor(r.standard_normal((1, 1, 4))), Tensor(v), 1)
        np.testing.assert_allclose(out.data[0], np.repeat(v[0], 3, axis=0), atol=1e-12)


class TestEncoder:
    def make(self, cfg=SMALL):
        return Encoder(cfg, np.random.default_rng(0))

    def test_shapes(self):
        imgs = np.random.default_rng(0).random((3, 16, 24, 3))
        assert self.make()(imgs, [K_SMALL] * 3).shape == (3, SMALL.num_tokens, 16)
        cfg = dataclasses.replace(SMALL, intrinsic_token=False)
        assert self.make(cfg)(imgs, [K_SMALL] * 3).shape == (3, cfg.num_patches, 16)

    def test_views_are_independent(self):
        enc = self.make()
        imgs = np.random.default_rng(0).random((3, 16, 24, 3)).astype(np.float32)
        base = enc(imgs, [K_SMALL] * 3).data
        for j in range(3):
            pert = imgs.copy()
            pert[j] = np.random.default_rng(j + 10).random((16, 24, 3))
            out = enc(pert, [K_SMALL] * 3).data
            for i in range(3):
                if i != j:
                    assert np.array_equal(out[i], base[i])
            assert not np.allclose(out[j], base[j])

    def test_identical_images_identical_tokens(self):
        img = np.random.default_rng(0).random((16, 24, 3))
        out = self.make()(np.stack([img, img]), [K_SMALL] * 2).data
        assert np.array_equal(out[0], out[1])

    def test_intrinsic_token_is_linear(self):
        enc = self.make()
        enc.intrinsic_embed.bias.data[...] = 0
        k = np.array([0.7, 0.9, 0.5, 0.5])
        np.testing.assert_allclose(enc.intrinsic_token(2 * k).data, 2 * enc.intrinsic_token(k).data, rtol=1e-5)
        enc.intrinsic_embed.weight.data[...] = 0
        assert np.all(enc.intrinsic_token(k).data == 0)


class TestCanonicalDecoder:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.blocks = [CanonicalBlock(8, 2, 2, rng) for _ in range(2)]
        r = np.random.default_rng(1)
        self.ref = r.standard_normal((1, 5, 8)).astype(np.float32)
        self.others = r.standard_normal((3, 5, 8)).astype(np.float32)

    def test_needs_other_views(self):
        with pytest.raises(ConfigError):
            canonical_decode(self.blocks, Tensor(self.ref), Tensor(np.zeros((0, 5, 8), np.float32)))

    def test_view_order_invariance(self):
        a = canonical_decode(self.blocks, Tensor(self.ref), Tensor(self.others)).data
        b = canonical_decode(self.blocks, Tensor(self.ref), Tensor(self.others[::-1].copy())).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_zero_cross_projection_cuts_other_views(self):
        for blk in self.blocks:
            blk.cross_attn.wo.weight.data[...] = 0
        a = canonical_decode(self.blocks, Tensor(self.ref), Tensor(self.others)).data
        b = canonical_decode(self.blocks, Tensor(self.ref), Tensor(self.others * 3 + 1)).data
        assert np.array_equal(a, b)

    def test_gradient_reaches_other_views(self):
        others = Tensor(self.others, requires_grad=True)
        canonical_decode(self.blocks, Tensor(self.ref), others).sum().backward()
        assert np.abs(others.grad).max() > 0
