import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GRAD_K, render_fn, renderer_instance
from tokensplat.autodiff.gradcheck import check_gradients
from tokensplat.gaussians import GaussianScene, rgb_to_sh_dc
from tokensplat.geometry import Intrinsics, Pose, axis_angle_to_quat
from tokensplat.renderer import (
    ALPHA_MAX, COV2D_FLOOR, RenderError, project_gaussian, read_ppm, read_raw, render, render_backward, write_ppm,
    write_raw,
)

K16 = Intrinsics(fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16)
seeds = st.integers(0, 2**32 - 1)


def scene_from(means, opac, scales, rgb, rot=None):
    n = len(means)
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rot is None else rot
    sh = np.zeros((n, 4, 3))
    sh[:, 0] = rgb_to_sh_dc(rgb)
    return GaussianScene.from_activated(means, opac, rot, scales, sh)


def random_scene(seed, n=6):
    r = np.random.default_rng(seed)
    means = np.c_[r.uniform(-1, 1, (n, 2)), r.uniform(1.5, 4.0, n)]
    return GaussianScene.from_activated(means, r.uniform(0.1, 0.95, n), r.standard_normal((n, 4)),
                                        r.uniform(0.05, 0.6, (n, 3)), r.standard_normal((n, 4, 3)) * 0.3)


class TestProjection:
    def test_on_axis_isotropic(self):
        g = scene_from([[0, 0, 2.0]], [0.5], [[0.2] * 3], [[1, 1, 1]])[0]
        s = project_gaussian(g, Pose.identity(), K16)
        np.testing.assert_allclose(s.mean2d, [8.0, 8.0], atol=1e-12)
        assert s.cov2d[0, 0] == pytest.approx(s.cov2d[1, 1]) and s.cov2d[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert s.cov2d[0, 0] == pytest.approx((16 * 0.2 / 2) ** 2 + COV2D_FLOOR)

    def test_behind_camera_culled(self):
        g = scene_from([[0, 0, -2.0]], [0.5], [[0.2] * 3], [[1, 1, 1]])[0]
        assert project_gaussian(g, Pose.identity(), K16) is None

    def test_far_outside_culled(self):
        g = scene_from([[50.0, 0, 2.0]], [0.5], [[0.05] * 3], [[1, 1, 1]])[0]
        assert project_gaussian(g, Pose.identity(), K16) is None

    @pytest.mark.parametrize("seed", range(5))
    def test_cov2d_matches_monte_carlo(self, seed):
        r = np.random.default_rng(seed)
        g = GaussianScene.from_activated([[0.2, -0.1, 5.0]], [0.5], r.standard_normal((1, 4)),
                                         r.uniform(0.02, 0.08, (1, 3)), np.zeros((1, 1, 3)))[0]
        pose = Pose(axis_angle_to_quat(r.standard_normal(3), 0.1), r.standard_normal(3) * 0.05)
        K = Intrinsics(100.0, 100.0, 32.0, 32.0, 64, 64)
        s = project_gaussian(g, pose, K)
        from tokensplat.gaussians import covariance
        pts = r.multivariate_normal(g.center, covariance(g.rotation, g.scale), size=200_000)
        cam = pose.inverse().apply(pts)
        uv = np.c_[K.fx * cam[:, 0] / cam[:, 2], K.fy * cam[:, 1] / cam[:, 2]]
        mc = np.cov(uv.T)
        est = s.cov2d - COV2D_FLOOR * np.eye(2)
        assert np.linalg.norm(est - mc) / np.linalg.norm(mc) < 0.05


class TestForward:
    def test_empty_scene_is_background(self):
        out = render(GaussianScene.empty(), Pose.identity(), K16, background=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(out.pixels, np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)), atol=1e-7)
        assert np.all(out.alpha == 0)

    def test_saturation(self):
        s = scene_from([[0, 0, 2.0]], [0.99999], [[50.0] * 3], [[1, 1, 1]])
        out = render(s, Pose.identity(), K16, background=(0.0, 0.0, 1.0))
        c = out.pixels[8, 8]
        np.testing.assert_allclose(c, [ALPHA_MAX, ALPHA_MAX, ALPHA_MAX + (1 - ALPHA_MAX)], atol=1e-2)

    def test_two_splat_closed_form(self):
        s = scene_from([[0, 0, 2.0], [0.05, 0.0, 3.0]], [0.6, 0.7], [[0.3] * 3, [0.4] * 3],
                       [[1, 0, 0], [0, 0, 1]])
        out = render(s, Pose.identity(), K16, dtype=np.float64)
        px = np.array([8.5, 8.5])
        a = []
        for i in range(2):
            sp = project_gaussian(s[i], Pose.identity(), K16)
            d = px - sp.mean2d
            a.append(min(sp.opacity * np.exp(-0.5 * d @ np.linalg.inv(sp.cov2d) @ d), ALPHA_MAX))
        expect = a[0] * np.array([1, 0, 0]) + (1 - a[0]) * a[1] * np.array([0, 0, 1])
        np.testing.assert_allclose(out.pixels[8, 8], expect, atol=1e-5)
        assert out.alpha[8, 8] == pytest.approx(1 - (1 - a[0]) * (1 - a[1]), abs=1e-5)

    @given(seeds)
    @settings(max_examples=30, deadline=None)
    def test_alpha_bounded_and_pixels_in_range(self, seed):
        out = render(random_scene(seed), Pose.identity(), K16)
        assert out.alpha.max() <= 1 + 1e-6 and out.alpha.min() >= 0
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1 + 1e-6

    @given(seeds)
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariance_bit_exact(self, seed):
        s = random_scene(seed)
        perm = np.random.default_rng(seed).permutation(len(s))
        a = render(s, Pose.identity(), K16)
        b = render(s.subset(perm), Pose.identity(), K16)
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.alpha, b.alpha)

    @given(seeds)
    @settings(max_examples=30, deadline=None)
    def test_joint_translation_invariance(self, seed):
        s = random_scene(seed)
        shift = np.random.default_rng(seed).uniform(-1, 1, 3)
        moved = GaussianScene(s.means + shift, s.opacity_logits, s.rotations, s.log_scales, s.sh)
        pose = Pose(axis_angle_to_quat([0, 1, 0], 0.1), [0.1, 0, 0])
        a = render(s, pose, K16, dtype=np.float64)
        b = render(moved, Pose(pose.rotation, pose.translation + shift), K16, dtype=np.float64)
        np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-5)

    def test_thread_count_independent(self):
        s = random_scene(3, n=12)
        a = render(s, Pose.identity(), K16, threads=1)
        b = render(s, Pose.identity(), K16, threads=4)
        np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-6)

    def test_tile_cull_matches_dense(self):
        s = random_scene(4, n=12)
        a = render(s, Pose.identity(), K16)
        b = render(s, Pose.identity(), K16, tile_cull=True)
        np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-4)

    def test_stats_count_culls(self):
        s = scene_from([[0, 0, 2.0], [0, 0, -1.0], [80.0, 0, 2.0]], [0.5] * 3, [[0.1] * 3] * 3, [[1, 1, 1]] * 3)
        st_ = render(s, Pose.identity(), K16).stats
        assert (st_.n_input, st_.n_rendered, st_.n_culled_near, st_.n_culled_outside) == (3, 1, 1, 1)


class TestBackward:
    def test_zero_pixel_grads(self):
        g = render_backward(random_scene(0), Pose.identity(), K16, np.zeros((16, 16, 3)))
        for v in g.values():
            assert np.all(v == 0)

    def test_shape_mismatch(self):
        with pytest.raises(RenderError):
            render_backward(random_scene(0), Pose.identity(), K16, np.zeros((8, 8, 3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_finite_differences(self, seed):
        assert check_gradients(render_fn(), renderer_instance(seed), seed=seed) < 1e-3

    def test_center_pixel_opacity_gradient(self):
        s = scene_from([[0, 0, 2.0]], [0.5], [[0.3] * 3], [[0.8, 0.4, 0.2]])
        pg = np.zeros((16, 16, 3))
        pg[8, 8] = 1.0
        g = render_backward(s, Pose.identity(), K16, pg, dtype=np.float64)["opacities"][0]
        h = 1e-4

        def f(o):
            sc = scene_from([[0, 0, 2.0]], [o], [[0.3] * 3], [[0.8, 0.4, 0.2]])
            return render(sc, Pose.identity(), K16, dtype=np.float64).pixels[8, 8].sum()

        fd = (f(0.5 + h) - f(0.5 - h)) / (2 * h)
        assert abs(g - fd) / abs(fd) < 1e-3

    def test_mean_x_gradient_antisymmetric_under_reflection(self):
        pg = np.ones((16, 16, 3))
        left = scene_from([[-0.3, 0, 2.0]], [0.5], [[0.3] * 3], [[0.5, 0.5, 0.5]])
        right = scene_from([[0.3, 0, 2.0]], [0.5], [[0.3] * 3], [[0.5, 0.5, 0.5]])
        gl = render_backward(left, Pose.identity(), K16, pg, dtype=np.float64)["means"][0, 0]
        gr = render_backward(right, Pose.identity(), K16, pg, dtype=np.float64)["means"][0, 0]
        assert abs(gl) > 1e-6
        assert gl == pytest.approx(-gr, rel=1e-6)


class TestImageIO:
    def test_raw_round_trip_exact(self, tmp_path):
        img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
        write_raw(tmp_path / "a.raw", img)
        assert np.array_equal(read_raw(tmp_path / "a.raw"), img)

    def test_ppm_quantises(self, tmp_path):
        img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
        write_ppm(tmp_path / "a.ppm", img)
        back = read_ppm(tmp_path / "a.ppm")
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")

    def test_grad_check_camera_is_tiny(self):
        assert GRAD_K.width <= 8 and GRAD_K.height <= 8
