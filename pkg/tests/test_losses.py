import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfsplat.cameras import CameraIntrinsics, CameraView
from surfsplat.losses import (
    LossBreakdown,
    bilinear_sample,
    flatten_loss,
    mv_consistency_loss,
    ncc,
    reprojection_weight,
    rgb_loss,
    sample_mv_pixels,
    total_loss,
)
from surfsplat.renderer import RenderOutput
from conftest import look_at_pose, random_cloud


def _plane_view_pair(size=64, fx=90.0, seed=0):
    """Two analytic views of a textured plane z=0 plus the exact reference
    geometry (depth, normal, alpha) for the first view."""
    from surfsplat.synthetic import _plane_texture

    intr = CameraIntrinsics(fx, fx, size / 2, size / 2, size, size)

    def build(vid, center):
        pose = look_at_pose(np.asarray(center, dtype=np.float64), np.zeros(3))
        ys, xs = np.mgrid[0:size, 0:size]
        d_cam = np.stack(
            [(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones((size, size))], -1
        )
        d_world = d_cam @ pose.rotation
        c = pose.center
        t = -c[2] / d_world[..., 2]
        x_world = c + t[..., None] * d_world
        img = _plane_texture(x_world[..., 0] / 2 + 0.5, x_world[..., 1] / 2 + 0.5)
        return CameraView(vid, intr, pose, img), t

    ref, depth = build("r", [0.6, 0.2, 1.8])
    nbr, _ = build("n", [0.1, 0.7, 1.9])
    normal = np.zeros((size, size, 3))
    normal[..., 2] = 1.0
    ref_render = RenderOutput(
        color=ref.image.copy(),
        depth=depth.copy(),
        normal=normal,
        alpha=np.ones((size, size)),
        per_gaussian_weight=np.zeros(0),
    )
    return ref, nbr, ref_render


class TestRgbLoss:
    def test_identical_images_zero(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        res = rgb_loss(img, img)
        assert res.value == pytest.approx(0.0, abs=1e-12)

    def test_constant_difference_l1_term(self):
        a = np.full((8, 8, 3), 0.6)
        b = np.full((8, 8, 3), 0.5)
        res = rgb_loss(a, b, lambda_ssim=0.0)
        assert res.value == pytest.approx(0.1, abs=1e-12)

    def test_all_masked_flags_and_zeroes(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        res = rgb_loss(a, b, mask=np.ones((8, 8)))
        assert res.all_masked
        assert res.value == 0.0
        assert np.all(res.d_color == 0)
        assert res.pixel_count == 0

    def test_masked_l1_matches_bruteforce(self):
        # unmasked-region brute-force oracle
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(12, 10, 3)), rng.uniform(size=(12, 10, 3))
        mask = (rng.uniform(size=(12, 10)) < 0.4).astype(np.uint8)
        res = rgb_loss(a, b, mask=mask, lambda_ssim=0.0)
        acc, n = 0.0, 0
        for i in range(12):
            for j in range(10):
                if mask[i, j] == 0:
                    acc += float(np.abs(a[i, j] - b[i, j]).sum())
                    n += 3
        assert res.value == pytest.approx(acc / n, rel=1e-12)
        assert res.pixel_count == (mask == 0).sum()

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(0.1, 0.9, (16, 14, 3)), rng.uniform(0.1, 0.9, (16, 14, 3))
        mask = (rng.uniform(size=(16, 14)) < 0.25).astype(np.uint8)
        res = rgb_loss(a, b, mask=mask)
        h = 1e-6
        for _ in range(25):
            i, j, c = rng.integers(16), rng.integers(14), rng.integers(3)
            a2 = a.copy()
            a2[i, j, c] += h
            lp = rgb_loss(a2, b, mask=mask).value
            a2[i, j, c] -= 2 * h
            lm = rgb_loss(a2, b, mask=mask).value
            fd = (lp - lm) / (2 * h)
            an = res.d_color[i, j, c]
            assert abs(fd - an) <= 1e-5 * max(abs(fd), abs(an), 1e-3)

    def test_masked_target_never_influences_loss_or_gradient(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[4:9, 5:11] = 1
        res = rgb_loss(a, b, mask=mask)
        b2 = b.copy()
        b2[4:9, 5:11] = rng.uniform(size=(5, 6, 3))
        res2 = rgb_loss(a, b2, mask=mask)
        assert res2.value == res.value
        assert np.array_equal(res2.d_color, res.d_color)
        assert np.all(res.d_color[4:9, 5:11] == 0)


class TestFlattenLoss:
    def test_clamp_floor(self):
        cloud = random_cloud(n=4, seed=0)
        cloud.log_scales[:] = -100.0  # clamped to 1e-6
        value, _ = flatten_loss(cloud)
        assert value == pytest.approx(1e-6)

    def test_mean_of_min_scales(self):
        cloud = random_cloud(n=2, seed=0)
        cloud.log_scales[0] = np.log([0.1, 0.5, 0.7])
        cloud.log_scales[1] = np.log([0.9, 0.3, 0.4])
        value, _ = flatten_loss(cloud)
        assert value == pytest.approx(0.2, rel=1e-12)

    def test_gradient_matches_fd(self):
        cloud = random_cloud(n=6, seed=1)
        _, grad = flatten_loss(cloud)
        rng = np.random.default_rng(2)
        h = 1e-7
        for _ in range(15):
            i, j = rng.integers(6), rng.integers(3)
            c2 = cloud.copy()
            c2.log_scales[i, j] += h
            lp, _ = flatten_loss(c2)
            c2.log_scales[i, j] -= 2 * h
            lm, _ = flatten_loss(c2)
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grad[i, j]) <= 1e-6 * max(abs(fd), 1e-9)


class TestNcc:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(11, 11))
        assert ncc(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_affine_invariance(self):
        a = np.random.default_rng(1).normal(size=(11, 11))
        assert ncc(a, 2 * a + 3) == pytest.approx(1.0, abs=1e-6)

    def test_antiparallel(self):
        a = np.random.default_rng(2).normal(size=(11, 11))
        assert ncc(a, -a) == pytest.approx(-1.0, abs=1e-6)

    def test_constant_patches_return_zero(self):
        assert ncc(np.ones((11, 11)), np.full((11, 11), 7.0)) == 0.0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), gain=st.floats(0.1, 5.0), bias=st.floats(-2, 2))
    def test_symmetry_bound_and_positive_gain_invariance(self, seed, gain, bias):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(11, 11))
        b = rng.normal(size=(11, 11))
        assert ncc(a, b) == pytest.approx(ncc(b, a), abs=1e-12)
        assert abs(ncc(a, b)) <= 1 + 1e-9
        assert ncc(a, gain * b + bias) == pytest.approx(ncc(a, b), abs=1e-6)


class TestBilinearSample:
    def test_matches_manual_weights(self):
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(9, 8))
        pts = np.array([[3.25, 4.75]])
        val = bilinear_sample(grid, pts)[0]
        x0, y0, fx, fy = 3, 4, 0.25, 0.75
        manual = (
            grid[y0, x0] * (1 - fx) * (1 - fy)
            + grid[y0, x0 + 1] * fx * (1 - fy)
            + grid[y0 + 1, x0] * (1 - fx) * fy
            + grid[y0 + 1, x0 + 1] * fx * fy
        )
        assert val == pytest.approx(manual, rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(6)
        grid = rng.normal(size=(12, 12))
        pts = rng.uniform(1, 10, size=(20, 2))
        _, grads = bilinear_sample(grid, pts, with_grad=True)
        h = 1e-6
        for k in range(20):
            for axis in range(2):
                p2 = pts.copy()
                p2[k, axis] += h
                lp = bilinear_sample(grid, p2)[k]
                p2[k, axis] -= 2 * h
                lm = bilinear_sample(grid, p2)[k]
                fd = (lp - lm) / (2 * h)
                assert abs(fd - grads[k, axis]) < 1e-6


class TestMvConsistency:
    def test_identical_view_zero_loss(self):
        ref, _, ref_render = _plane_view_pair()
        rng = np.random.default_rng(0)
        samples = sample_mv_pixels(ref_render, None, rng, max_samples=100)
        res = mv_consistency_loss(ref, ref, ref_render, samples)
        assert res.valid_count > 50
        assert res.value < 1e-6

    def test_true_plane_geometry_low_loss(self):
        ref, nbr, ref_render = _plane_view_pair()
        rng = np.random.default_rng(1)
        samples = sample_mv_pixels(ref_render, None, rng, max_samples=200)
        res = mv_consistency_loss(ref, nbr, ref_render, samples)
        assert res.valid_count > 100
        assert res.value < 1e-3

    def test_depth_perturbation_increases_loss(self):
        ref, nbr, ref_render = _plane_view_pair()
        rng = np.random.default_rng(2)
        samples = sample_mv_pixels(ref_render, None, rng, max_samples=200)
        base = mv_consistency_loss(ref, nbr, ref_render, samples).value
        bad = RenderOutput(
            ref_render.color, ref_render.depth * 1.05, ref_render.normal,
            ref_render.alpha, ref_render.per_gaussian_weight,
        )
        worse = mv_consistency_loss(ref, nbr, bad, samples).value
        assert worse > base

    def test_gradients_match_fd(self):
        ref, nbr, ref_render = _plane_view_pair()
        rng = np.random.default_rng(3)
        samples = sample_mv_pixels(ref_render, None, rng, max_samples=60)
        depth = ref_render.depth * 1.03
        normal = ref_render.normal + rng.normal(scale=0.05, size=ref_render.normal.shape)
        state = RenderOutput(ref_render.color, depth, normal, ref_render.alpha, ref_render.per_gaussian_weight)
        res = mv_consistency_loss(ref, nbr, state, samples)
        assert res.valid_count > 30

        def value(d, n):
            rr = RenderOutput(ref_render.color, d, n, ref_render.alpha, ref_render.per_gaussian_weight)
            return mv_consistency_loss(ref, nbr, rr, samples).value

        h = 1e-6
        for _ in range(10):
            x, y = res.ref_pixels[rng.integers(len(res.ref_pixels))]
            d2 = depth.copy()
            d2[y, x] += h
            fd = (value(d2, normal) - value(depth, normal)) / h
            d2[y, x] -= 2 * h
            fd = (fd + (value(depth, normal) - value(d2, normal)) / h) / 2
            an = res.d_depth[y, x]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)
            c = rng.integers(3)
            n2 = normal.copy()
            n2[y, x, c] += h
            lp = value(depth, n2)
            n2[y, x, c] -= 2 * h
            lm = value(depth, n2)
            fd = (lp - lm) / (2 * h)
            an = res.d_normal[y, x, c]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)

    def test_patches_exiting_neighbor_are_dropped(self):
        ref, nbr, ref_render = _plane_view_pair()
        # samples hugging the left border warp outside for this camera pair
        edge = np.array([[6, y] for y in range(8, 56)])
        res = mv_consistency_loss(ref, nbr, ref_render, edge)
        assert res.valid_count <= len(edge)

    def test_constant_reference_patch_dropped(self):
        ref, nbr, ref_render = _plane_view_pair()
        flat = RenderOutput(
            np.zeros_like(ref_render.color), ref_render.depth, ref_render.normal,
            ref_render.alpha, ref_render.per_gaussian_weight,
        )
        flat_view = CameraView(ref.id, ref.intrinsics, ref.pose, np.full_like(np.asarray(ref.image), 0.5))
        samples = np.array([[32, 32], [20, 40]])
        res = mv_consistency_loss(flat_view, nbr, flat, samples)
        assert res.valid_count == 0
        assert res.value == 0.0

    def test_neighbor_mask_drops_touching_samples(self):
        ref, nbr, ref_render = _plane_view_pair()
        rng = np.random.default_rng(4)
        samples = sample_mv_pixels(ref_render, None, rng, max_samples=150)
        full = mv_consistency_loss(ref, nbr, ref_render, samples)
        nbr_mask = np.ones(ref_render.alpha.shape, dtype=np.uint8)
        res = mv_consistency_loss(ref, nbr, ref_render, samples, nbr_mask=nbr_mask)
        assert full.valid_count > 0
        assert res.valid_count == 0


class TestReprojectionWeight:
    def test_perfect_roundtrip(self):
        p = np.array([[10.0, 20.0], [30.0, 5.0]])
        e, w = reprojection_weight(p, p, np.eye(3))
        assert e == 0.0 and w == 1.0

    def test_one_pixel_error(self):
        ref = np.array([[10.0, 20.0]])
        nbr = np.array([[11.0, 20.0]])
        e, w = reprojection_weight(ref, nbr, np.eye(3))
        assert e == pytest.approx(1.0)
        assert w == pytest.approx(0.5)

    def test_three_pixel_error(self):
        ref = np.array([[10.0, 20.0]])
        nbr = np.array([[10.0, 23.0]])
        e, w = reprojection_weight(ref, nbr, np.eye(3))
        assert e == pytest.approx(3.0)
        assert w == pytest.approx(0.25)


class TestTotalLoss:
    def test_paper_constants_arithmetic(self):
        br = total_loss(0.1, 0.001, 0.2, 0.5)
        assert br.total == pytest.approx(0.1 + 100 * 0.001 + 0.2 * 0.5 * 0.2, abs=1e-12)

    def test_all_zero(self):
        assert total_loss(0, 0, 0, 1.0).total == 0.0

    def test_lambda_mv_zero_ignores_mv(self):
        a = total_loss(0.3, 0.002, 0.9, 0.7, lambda_mv=0.0)
        b = total_loss(0.3, 0.002, 0.1, 0.7, lambda_mv=0.0)
        assert a.total == b.total

    def test_ledger_identity_on_random_inputs(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            l_rgb, l_s, l_mv = rng.uniform(0, 2, 3)
            w = rng.uniform(0, 1)
            br = total_loss(l_rgb, l_s, l_mv, w)
            assert abs(br.total - (l_rgb + 100.0 * l_s + 0.2 * w * l_mv)) < 1e-9
