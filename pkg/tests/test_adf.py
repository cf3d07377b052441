import numpy as np
import pytest

from oracles import dense_attention
from tokensplat.adf import (
    AdfBlock, Modulation, camera_token_init, modulate_post, modulate_pre, neighbor_views, pool_index,
)
from tokensplat.autodiff import Tensor
from tokensplat.backbone import ConfigError

D = 8


def make_block(seed=0, heads=1, live_modulation=True):
    blk = AdfBlock(D, heads, 2, np.random.default_rng(seed))
    if live_modulation:
        # zero-init hides the modulation path; give it weights so the tests see it
        r = np.random.default_rng(seed + 100)
        for m in (blk.pre_mod, blk.post_mod):
            m.fc2.weight.data[...] = r.standard_normal(m.fc2.weight.shape).astype(np.float32) * 0.3
    return blk


def random_state(n, t=3, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, t, D)).astype(np.float64), r.standard_normal((n - 1, 1, D)).astype(np.float64)


def run(blk, tokens, cams, pnv):
    img, cam = blk(Tensor(tokens), Tensor(cams), pnv)
    return img.data, cam.data


class TestNeighbours:
    @pytest.mark.parametrize("i,n,pnv,expect", [
        (0, 4, 2, [1]), (3, 4, 2, [2]), (1, 4, 2, [0]), (2, 5, 3, [1, 3]), (0, 5, 3, [1, 2]),
        (4, 5, 3, [2, 3]), (1, 3, 8, [0, 2]), (2, 6, 4, [0, 1, 3]),
    ])
    def test_window(self, i, n, pnv, expect):
        assert neighbor_views(i, n, pnv) == expect

    def test_never_own_view(self):
        for n in range(2, 7):
            for i in range(n):
                for pnv in range(2, 9):
                    nb = neighbor_views(i, n, pnv)
                    assert i not in nb and len(nb) == min(pnv - 1, n - 1)

    def test_pool_index(self):
        np.testing.assert_array_equal(pool_index([0, 2], 2), [0, 1, 4, 5])


class TestCameraTokens:
    def test_duplicated(self):
        e = Tensor(np.random.default_rng(0).standard_normal((1, 1, D)))
        toks = camera_token_init(e, 8).data
        assert toks.shape == (7, 1, D) and all(np.array_equal(toks[0], t) for t in toks)
        assert camera_token_init(e, 2).shape == (1, 1, D)

    def test_needs_two_views(self):
        with pytest.raises(ConfigError):
            camera_token_init(Tensor(np.zeros((1, 1, D))), 1)

    def test_tokens_diverge_after_one_block(self):
        blk = make_block()
        tokens, _ = random_state(4)
        cams = np.repeat(np.random.default_rng(5).standard_normal((1, 1, D)), 3, axis=0)
        _, cam = run(blk, tokens, cams, 4)
        assert not np.allclose(cam[0], cam[1]) and not np.allclose(cam[1], cam[2])


class TestModulation:
    def test_zero_parameters_are_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, D)))
        z = Tensor(np.zeros((2, 1, D)))
        assert np.array_equal(modulate_pre(x, z, z).data, x.data)
        assert np.array_equal(modulate_post(x, z).data, x.data)

    def test_formulas(self):
        r = np.random.default_rng(1)
        x, s, b, g = r.standard_normal((2, 3, D)), r.standard_normal((2, 1, D)), r.standard_normal((2, 1, D)), \
            r.standard_normal((2, 1, D))
        np.testing.assert_allclose(modulate_pre(Tensor(x), Tensor(s), Tensor(b)).data, x * (1 + s) + b, atol=1e-12)
        np.testing.assert_allclose(modulate_post(Tensor(x), Tensor(g)).data, (1 + g) * x, atol=1e-12)

    def test_zero_init_output(self):
        m = Modulation(D, 2, np.random.default_rng(0))
        for part in m(Tensor(np.random.default_rng(1).standard_normal((3, 1, D)))):
            assert np.all(part.data == 0)

    def test_zero_init_block_ignores_camera_tokens(self):
        blk = make_block(live_modulation=False)
        tokens, cams = random_state(3)
        a, _ = run(blk, tokens, cams, 3)
        b, _ = run(blk, tokens, cams * 5 - 2, 3)
        assert np.array_equal(a, b)

    def test_camera_gradient_flows_only_through_modulation(self):
        blk = make_block()
        tokens, cams = random_state(3)
        cam_t = Tensor(cams, requires_grad=True)
        img, _ = blk(Tensor(tokens), cam_t, 3)
        img.sum().backward()
        assert np.abs(cam_t.grad).max() > 0
        for m in (blk.pre_mod, blk.post_mod):
            m.fc2.weight.data[...] = 0
        cam_t = Tensor(cams, requires_grad=True)
        img, _ = blk(Tensor(tokens), cam_t, 3)
        img.sum().backward()
        assert cam_t.grad is None or np.all(cam_t.grad == 0)


class TestDirectionalFlow:
    @pytest.mark.parametrize("n", [2, 3, 4])
    @pytest.mark.parametrize("seed", range(3))
    def test_other_camera_tokens_do_not_reach_image_tokens(self, n, seed):
        blk = make_block(seed)
        tokens, cams = random_state(n, seed=seed)
        base, _ = run(blk, tokens, cams, n)
        for j in range(n - 1):
            pert = cams.copy()
            pert[j] += np.random.default_rng(seed + j).standard_normal((1, D)) * 3
            out, _ = run(blk, tokens, pert, n)
            for i in range(n - 1):
                if i == j:
                    assert not np.allclose(out[i], base[i])
                else:
                    assert np.array_equal(out[i], base[i])

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_self_attention_image_branch_ignores_camera_token(self, n):
        blk = make_block(live_modulation=False)
        tokens, cams = random_state(n)
        img = Tensor(tokens[1:])
        a, _ = blk.self_attention(img, Tensor(cams))
        b, _ = blk.self_attention(img, Tensor(cams * -4 + 1))
        assert np.array_equal(a.data, b.data)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_self_attention_ignores_camera_with_modulation_held(self, n):
        blk = make_block()
        tokens, cams = random_state(n)
        img = Tensor(tokens[1:])
        pre = blk.pre_mod(Tensor(cams))
        a, cam_a = blk.self_attention(img, Tensor(cams), pre)
        b, cam_b = blk.self_attention(img, Tensor(cams * -4 + 1), pre)
        assert np.array_equal(a.data, b.data)
        assert not np.allclose(cam_a.data, cam_b.data)

    def test_camera_reaches_image_branch_only_through_modulation(self):
        blk = make_block()
        tokens, cams = random_state(3)
        img = Tensor(tokens[1:])
        a, _ = blk.self_attention(img, Tensor(cams))
        b, _ = blk.self_attention(img, Tensor(cams * -4 + 1))
        assert not np.allclose(a.data, b.data)

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_own_view_excluded_from_cross_view(self, n):
        blk = make_block()
        tokens, cams = random_state(n)
        k, v = blk.snapshot_kv(Tensor(tokens))
        pools = np.stack([pool_index(neighbor_views(i, n, n), 3) for i in range(1, n)])
        img = Tensor(tokens[1:])
        base = blk.cross_view_attention(img, k, v, pools).data
        for i in range(1, n):
            noisy = tokens.copy()
            noisy[i] = np.random.default_rng(i).standard_normal((3, D)) * 10
            k2, v2 = blk.snapshot_kv(Tensor(noisy))
            out = blk.cross_view_attention(img, k2, v2, pools).data
            assert np.array_equal(out[i - 1], base[i - 1])

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_pnv_at_least_n_is_dense(self, n):
        blk = make_block(heads=1)
        tokens, cams = random_state(n, seed=7)
        big, _ = run(blk, tokens, cams, n)
        bigger, _ = run(blk, tokens, cams, n + 5)
        assert np.array_equal(big, bigger)
        # dense reference: full KV table with the own view masked out
        k, v = blk.snapshot_kv(Tensor(tokens))
        q = blk.xq(blk.norm2(Tensor(tokens[1:]))).data
        t = tokens.shape[1]
        for i in range(1, n):
            mask = np.ones((t, n * t), bool)
            mask[:, i * t:(i + 1) * t] = False
            ref = dense_attention(q[i - 1], k.data, v.data, mask)
            got = blk.cross_view_attention(Tensor(tokens[1:]), k, v,
                                           np.stack([pool_index(neighbor_views(j, n, n), t) for j in range(1, n)]))
            np.testing.assert_allclose(ref @ blk.xo.weight.data.T + blk.xo.bias.data, got.data[i - 1], atol=1e-6)

    def test_two_views_pnv_irrelevant(self):
        blk = make_block()
        tokens, cams = random_state(2)
        assert np.array_equal(run(blk, tokens, cams, 2)[0], run(blk, tokens, cams, 100)[0])

    def test_limited_pnv_differs_from_dense(self):
        blk = make_block()
        tokens, cams = random_state(5)
        assert not np.allclose(run(blk, tokens, cams, 2)[0], run(blk, tokens, cams, 5)[0])


class TestDenseOracles:
    """Each sub-layer against a direct single-head formula evaluation."""

    def setup_method(self):
        self.blk = make_block(seed=3, heads=1)
        self.tokens, self.cams = random_state(3, t=4, seed=11)

    def lin(self, layer, x):
        return x @ layer.weight.data.T.astype(np.float64) + layer.bias.data

    def ln(self, layer, x):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + layer.eps) * layer.gain.data + layer.bias.data

    def mod(self, m, c):
        h = self.lin(m.fc1, c)
        h = 0.5 * h * (1 + np.tanh(np.sqrt(2 / np.pi) * (h + 0.044715 * h**3)))
        out = self.lin(m.fc2, h)
        return np.split(out, m.parts, axis=-1)

    def test_self_attention(self):
        b = self.blk
        img, cam = self.tokens[1:], self.cams
        branch, new_cam = b.self_attention(Tensor(img), Tensor(cam))
        for i in range(2):
            scale, shift = self.mod(b.pre_mod, cam[i])
            h = self.ln(b.norm1, img[i]) * (1 + scale) + shift
            q, k, v = self.lin(b.wq, h), self.lin(b.wk, h), self.lin(b.wv, h)
            np.testing.assert_allclose(branch.data[i], self.lin(b.wo, dense_attention(q, k, v)), atol=1e-6)
            qc = self.lin(b.cam_q, self.ln(b.norm1_cam, cam[i]))
            np.testing.assert_allclose(new_cam.data[i], cam[i] + self.lin(b.cam_o, dense_attention(qc, k, v)),
                                       atol=1e-6)

    def test_single_token_self_attention_returns_value(self):
        b = self.blk
        img = self.tokens[1:, :1]
        branch, _ = b.self_attention(Tensor(img), Tensor(np.zeros_like(self.cams)))
        h = self.ln(b.norm1, img[0])
        np.testing.assert_allclose(branch.data[0], self.lin(b.wo, self.lin(b.wv, h)), atol=1e-6)

    def test_cross_view_attention(self):
        b, toks = self.blk, self.tokens
        n, t = toks.shape[:2]
        k, v = b.snapshot_kv(Tensor(toks))
        pools = np.stack([pool_index(neighbor_views(i, n, n), t) for i in range(1, n)])
        out = b.cross_view_attention(Tensor(toks[1:]), k, v, pools).data
        kv_in = self.ln(b.norm_kv, toks)
        for i in range(1, n):
            others = [j for j in range(n) if j != i]
            kk = np.concatenate([self.lin(b.xk, kv_in[j]) for j in others])
            vv = np.concatenate([self.lin(b.xv, kv_in[j]) for j in others])
            q = self.lin(b.xq, self.ln(b.norm2, toks[i]))
            np.testing.assert_allclose(out[i - 1], self.lin(b.xo, dense_attention(q, kk, vv)), atol=1e-6)

    def camera_reference(self, toks, cams, i):
        b = self.blk
        n = toks.shape[0]
        kv_in = self.ln(b.norm_kv, toks)
        kk, vv = [], []
        for j in range(n):
            if j == i:
                continue
            if j == 0:
                ck = cv = np.zeros(D)
            else:
                hc = self.ln(b.norm_kv_cam, cams[j - 1, 0])
                ck, cv = self.lin(b.xk, hc), self.lin(b.xv, hc)
            kk.append(self.lin(b.xk, kv_in[j]) + ck)  # camera key repeated over view j's tokens
            vv.append(self.lin(b.xv, kv_in[j]) + cv)
        q = self.lin(b.cam_xq, self.ln(b.norm2_cam, cams[i - 1]))
        return self.lin(b.cam_xo, dense_attention(q, np.concatenate(kk), np.concatenate(vv)))

    def camera_out(self, toks, cams):
        b = self.blk
        n, t = toks.shape[:2]
        k, v = b.snapshot_kv(Tensor(toks))
        pools = np.stack([pool_index([j for j in range(n) if j != i], t) for i in range(1, n)])
        return b.camera_cross_attention(Tensor(cams), k, v, Tensor(cams), pools, t).data

    def test_camera_cross_attention(self):
        out = self.camera_out(self.tokens, self.cams)
        for i in range(1, 3):
            np.testing.assert_allclose(out[i - 1], self.camera_reference(self.tokens, self.cams, i), atol=1e-6)

    def test_camera_cross_attention_zero_image_tokens(self):
        # image keys reduce to the projection bias; the pool is then the repeated camera keys plus that bias
        toks = np.zeros_like(self.tokens)
        out = self.camera_out(toks, self.cams)
        for i in range(1, 3):
            np.testing.assert_allclose(out[i - 1], self.camera_reference(toks, self.cams, i), atol=1e-6)

    def test_zero_camera_contribution_reduces_to_image_pool(self):
        b = self.blk
        b.norm_kv_cam.gain.data[...] = 0
        b.norm_kv_cam.bias.data[...] = 0
        b.xk.bias.data[...] = 0
        b.xv.bias.data[...] = 0
        toks, cams = self.tokens, self.cams
        n, t = toks.shape[:2]
        out = self.camera_out(toks, cams)
        kv_in = self.ln(b.norm_kv, toks)
        for i in range(1, n):
            others = [j for j in range(n) if j != i]
            kk = np.concatenate([self.lin(b.xk, kv_in[j]) for j in others])
            vv = np.concatenate([self.lin(b.xv, kv_in[j]) for j in others])
            q = self.lin(b.cam_xq, self.ln(b.norm2_cam, cams[i - 1]))
            np.testing.assert_allclose(out[i - 1], self.lin(b.cam_xo, dense_attention(q, kk, vv)), atol=1e-6)

    def test_block_composition(self):
        b = self.blk
        toks, cams = self.tokens, self.cams
        img, cam = run(b, toks, cams, 3)
        branch, cam1 = b.self_attention(Tensor(toks[1:]), Tensor(cams))
        (gate,) = self.mod(b.post_mod, cam1.data)
        x = toks[1:] + (1 + gate) * branch.data
        k, v = b.snapshot_kv(Tensor(toks))
        pools = np.stack([pool_index(neighbor_views(i, 3, 3), 4) for i in (1, 2)])
        x = x + b.cross_view_attention(Tensor(x), k, v, pools).data
        cpools = np.stack([pool_index([j for j in range(3) if j != i], 4) for i in (1, 2)])
        c = cam1.data + b.camera_cross_attention(cam1, k, v, Tensor(cams), cpools, 4).data
        x = x + b.mlp(b.norm3(Tensor(x))).data
        c = c + b.mlp_cam(b.norm3_cam(Tensor(c))).data
        np.testing.assert_allclose(img, x, atol=1e-6)
        np.testing.assert_allclose(cam, c, atol=1e-6)

    def test_softmax_rows_stochastic(self):
        from tokensplat.backbone import attend
        r = np.random.default_rng(0)
        _, w = attend(Tensor(r.standard_normal((2, 3, D))), Tensor(r.standard_normal((2, 6, D))),
                      Tensor(r.standard_normal((2, 6, D))), 2, return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)

    def test_deterministic(self):
        a = run(make_block(5), *random_state(4), 3)
        b = run(make_block(5), *random_state(4), 3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
