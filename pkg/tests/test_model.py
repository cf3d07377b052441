import dataclasses

import numpy as np
import pytest

from conftest import TINY_MODEL
from tokensplat.autodiff import no_grad
from tokensplat.backbone import ConfigError
from tokensplat.fusion import group_tokens
from tokensplat.model import TokenSplat


def inputs(scene):
    return scene.context_images, [scene.intrinsics] * scene.num_views


class TestForward:
    def test_shapes_and_counts(self, tiny_scene):
        with no_grad():
            out = TokenSplat(TINY_MODEL)(*inputs(tiny_scene))
        n, p, k2 = 3, TINY_MODEL.num_patches, TINY_MODEL.k_per_token
        c = out.counts
        assert c["input_tokens"] == n * p and c["pixel_aligned"] == n * p * k2
        assert 1 <= c["fused_tokens"] <= n * p and c["gaussians"] == c["fused_tokens"] * k2
        assert out.pose_q.shape == (n - 1, 4) and out.pose_t.shape == (n - 1, 3)
        assert out.coarse_positions.shape == (n * p, 3) and out.confidences.shape == (n * p,)
        assert len(out.taps) == 4 and out.taps[0].shape == (n, TINY_MODEL.num_tokens, TINY_MODEL.embed_dim)
        assert len(out.scene()) == c["gaussians"]
        poses = out.poses()
        assert len(poses) == n and np.array_equal(poses[0].as_vector(), [1, 0, 0, 0, 0, 0, 0])

    def test_deterministic_per_seed(self, tiny_scene):
        with no_grad():
            a = TokenSplat(TINY_MODEL, seed=1)(*inputs(tiny_scene))
            b = TokenSplat(TINY_MODEL, seed=1)(*inputs(tiny_scene))
        assert np.array_equal(a.gaussians["means"].data, b.gaussians["means"].data)
        assert np.array_equal(a.pose_q.data, b.pose_q.data)

    def test_eps_controls_fusion(self, tiny_scene):
        model = TokenSplat(TINY_MODEL)
        with no_grad():
            for eps in (1e-6, 0.1, 100.0):
                out = model(*inputs(tiny_scene), eps=eps)
                assert out.counts["fused_tokens"] == len(group_tokens(out.coarse_positions.data, eps))
            fine = model(*inputs(tiny_scene), eps=1e-6).counts["fused_tokens"]
        # at init every view's positions equal the shared ray prior, so views coincide
        assert fine == TINY_MODEL.num_patches

    def test_gradients_reach_every_parameter_group(self, tiny_scene):
        model = TokenSplat(TINY_MODEL)
        out = model(*inputs(tiny_scene))
        (out.gaussians["means"].sum() + out.pose_t.sum() + out.gaussians["sh"].sum()).backward()
        for prefix in ("encoder", "adf", "canonical", "coarse", "head", "pose_head"):
            grads = [p.grad for n, p in model.named_parameters() if n.startswith(prefix) and p.grad is not None]
            assert grads and any(np.abs(g).max() > 0 for g in grads), prefix

    @pytest.mark.parametrize("bad", ["one_view", "size", "intrinsics"])
    def test_input_validation(self, tiny_scene, bad):
        imgs, ks = inputs(tiny_scene)
        if bad == "one_view":
            imgs, ks = imgs[:1], ks[:1]
        elif bad == "size":
            imgs = np.zeros((3, 32, 16, 3), np.float32)
        else:
            ks = ks[:2]
        with pytest.raises(ConfigError):
            TokenSplat(TINY_MODEL)(imgs, ks)

    def test_without_intrinsic_token(self, tiny_scene):
        cfg = dataclasses.replace(TINY_MODEL, intrinsic_token=False)
        with no_grad():
            out = TokenSplat(cfg)(*inputs(tiny_scene))
        assert out.taps[0].shape[1] == cfg.num_patches
