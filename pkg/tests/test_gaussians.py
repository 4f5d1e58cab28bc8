import numpy as np
import pytest

from surfsplat.cameras import GeometryError
from surfsplat.gaussians import (
    GaussianCloud,
    GaussianPrimitive,
    covariance_3d,
    evaluate_gaussian,
    load_ply,
    ply_bytes,
    project_gaussian,
    quat_normalize,
    quat_rotation_jacobian,
    quat_to_rotation,
    save_ply,
    sh_basis,
    sh_basis_grad,
    sh_to_color,
)
from conftest import make_view, random_cloud, random_pose

SH_C0 = 0.28209479177387814


def prim(position=(0, 0, 2), rotation=(1, 0, 0, 0), log_scale=(0, 0, 0), opacity_logit=0.0, sh=None, degree=1):
    k = (degree + 1) ** 2
    sh = np.zeros((k, 3)) if sh is None else np.asarray(sh, dtype=np.float64)
    return GaussianPrimitive(
        np.asarray(position, dtype=np.float64),
        np.asarray(rotation, dtype=np.float64),
        np.asarray(log_scale, dtype=np.float64),
        float(opacity_logit),
        sh,
    )


class TestCovariance:
    def test_identity(self):
        assert np.allclose(covariance_3d(prim()), np.eye(3))

    def test_scaled_first_axis(self):
        g = prim(log_scale=(np.log(2.0), 0, 0))
        assert np.allclose(covariance_3d(g), np.diag([4.0, 1.0, 1.0]))

    def test_eigenvalues_match_scales(self):
        # eigen-decomposition oracle
        rng = np.random.default_rng(2)
        for _ in range(30):
            q = rng.normal(size=4)
            ls = rng.uniform(-2.5, 0.5, size=3)
            g = prim(rotation=q, log_scale=ls)
            cov = covariance_3d(g)
            assert np.max(np.abs(cov - cov.T)) < 1e-12
            eig = np.sort(np.linalg.eigvalsh(cov))
            assert np.allclose(eig, np.sort(np.exp(2 * ls)), rtol=1e-9)
            np.linalg.cholesky(cov)  # PSD

    def test_scale_clamped_keeps_invertible(self):
        g = prim(log_scale=(-50.0, 0, 0))
        cov = covariance_3d(g)
        assert np.linalg.det(cov) > 0


class TestEvaluate:
    def test_unit_at_mean(self):
        g = prim()
        assert evaluate_gaussian(g, g.position) == 1.0

    def test_unit_distance_isotropic(self):
        g = prim()
        val = evaluate_gaussian(g, g.position + [1, 0, 0])
        assert np.isclose(val, np.exp(-0.5), atol=1e-12)

    def test_anisotropic_matches_quadratic_form(self):
        # explicit Σ⁻¹ solve oracle
        rng = np.random.default_rng(4)
        for _ in range(20):
            g = prim(rotation=rng.normal(size=4), log_scale=rng.uniform(-2, 0.5, 3))
            x = g.position + rng.normal(scale=0.3, size=3)
            d = x - g.position
            expected = np.exp(-0.5 * d @ np.linalg.inv(covariance_3d(g)) @ d)
            assert np.isclose(evaluate_gaussian(g, x), expected, rtol=1e-9)


class TestProjectGaussian:
    def test_isotropic_small_angle(self):
        s = 0.01
        g = prim(position=(0, 0, 2.0), log_scale=(np.log(s),) * 3)
        view = make_view(fx=120, fy=120, cx=32, cy=32)
        mu, cov, depth, _ = project_gaussian(g, view)
        assert np.allclose(mu, [32, 32])
        assert depth == 2.0
        assert np.allclose(cov, (120 * s / 2.0) ** 2 * np.eye(2), rtol=1e-6)

    def test_depth_doubling_quarters_covariance(self):
        s = 0.01
        view = make_view(fx=120, fy=120, cx=32, cy=32)
        _, cov1, _, _ = project_gaussian(prim(position=(0, 0, 1.0), log_scale=(np.log(s),) * 3), view)
        _, cov2, _, _ = project_gaussian(prim(position=(0, 0, 2.0), log_scale=(np.log(s),) * 3), view)
        assert np.allclose(cov2, cov1 / 4.0, rtol=1e-9)

    def test_behind_camera(self):
        with pytest.raises(GeometryError):
            project_gaussian(prim(position=(0, 0, -1.0)), make_view())

    def test_matches_numerical_jacobian_pushforward(self):
        # numerical-Jacobian oracle: FD of the projection around the mean,
        # pushforward of the camera-frame covariance
        rng = np.random.default_rng(9)
        for _ in range(10):
            pose = random_pose(rng)
            view = make_view(fx=95.0, fy=105.0, cx=31.0, cy=33.0, pose=pose)
            g = prim(
                position=pose.rotation.T @ (np.array([0.1, -0.05, 2.5]) - pose.translation),
                rotation=rng.normal(size=4),
                log_scale=rng.uniform(-3, -1.5, 3),
            )
            mu, cov2d, depth, _ = project_gaussian(g, view)

            def project_cam(pc):
                return np.array([95.0 * pc[0] / pc[2] + 31.0, 105.0 * pc[1] / pc[2] + 33.0])

            p_cam = pose.rotation @ g.position + pose.translation
            h = 1e-6
            jac = np.zeros((2, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = h
                jac[:, a] = (project_cam(p_cam + e) - project_cam(p_cam - e)) / (2 * h)
            cov_cam = pose.rotation @ covariance_3d(g) @ pose.rotation.T
            expected = jac @ cov_cam @ jac.T
            assert np.allclose(cov2d, expected, rtol=1e-4, atol=1e-10)

    def test_normal_unit_and_facing_camera(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            pose = random_pose(rng)
            p_cam = rng.normal(scale=0.4, size=3) + [0, 0, 3]
            g = prim(
                position=pose.rotation.T @ (p_cam - pose.translation),
                rotation=rng.normal(size=4),
                log_scale=rng.uniform(-3, 0, 3),
            )
            _, _, _, n_cam = project_gaussian(g, make_view(pose=pose))
            assert abs(np.linalg.norm(n_cam) - 1) < 1e-9
            assert n_cam[2] <= 0

    def test_joint_translation_invariance(self):
        rng = np.random.default_rng(13)
        pose = random_pose(rng)
        g = prim(position=pose.rotation.T @ (np.array([0, 0, 2.0]) - pose.translation),
                 rotation=rng.normal(size=4), log_scale=rng.uniform(-3, -1, 3))
        view = make_view(pose=pose)
        mu1, cov1, d1, _ = project_gaussian(g, view)

        offset = rng.normal(size=3)
        from surfsplat.cameras import CameraPose

        pose2 = CameraPose(pose.rotation, -pose.rotation @ (pose.center + offset))
        g2 = prim(position=g.position + offset, rotation=g.rotation, log_scale=g.log_scale)
        mu2, cov2, d2, _ = project_gaussian(g2, make_view(pose=pose2))
        assert np.allclose(mu1, mu2, atol=1e-9)
        assert np.allclose(cov1, cov2, atol=1e-9)
        assert np.isclose(d1, d2, atol=1e-9)


def _sh_table_eval(sh, d):
    """Independent SH oracle: explicit real-basis polynomial table."""
    x, y, z = d
    basis = [
        0.28209479177387814,
        -0.4886025119029199 * y,
        0.4886025119029199 * z,
        -0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (2 * z * z - x * x - y * y),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
        -0.5900435899266435 * y * (3 * x * x - y * y),
        2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4 * z * z - x * x - y * y),
        0.3731763325901154 * z * (2 * z * z - 3 * x * x - 3 * y * y),
        -0.4570457994644658 * x * (4 * z * z - x * x - y * y),
        1.445305721320277 * z * (x * x - y * y),
        -0.5900435899266435 * x * (x * x - 3 * y * y),
    ]
    out = np.zeros(3)
    for k in range(len(sh)):
        out += basis[k] * sh[k]
    return np.clip(out + 0.5, 0.0, 1.0)


class TestShColor:
    def test_degree0_constant_band(self):
        c = np.array([0.4, -0.2, 0.9])
        g = prim(sh=np.array([c]), degree=0)
        for d in ([0, 0, 1], [1, 0, 0], [0.6, -0.64, 0.48]):
            expected = np.clip(SH_C0 * c + 0.5, 0, 1)
            assert np.allclose(sh_to_color(g, np.array(d, dtype=np.float64)), expected)

    def test_degree1_z_band_odd_symmetry(self):
        sh = np.zeros((4, 3))
        sh[2] = [0.3, 0.3, 0.3]  # z-linear band
        g = prim(sh=sh, degree=1)
        up = sh_to_color(g, np.array([0.0, 0.0, 1.0]))
        down = sh_to_color(g, np.array([0.0, 0.0, -1.0]))
        band = 0.4886025119029199 * 0.3
        assert np.allclose(up - down, 2 * band)

    def test_degree3_matches_table_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            sh = rng.normal(scale=0.2, size=(16, 3))
            g = prim(sh=sh, degree=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            assert np.allclose(sh_to_color(g, d), _sh_table_eval(sh, d), atol=1e-12)


class TestQuaternionJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        h = 1e-7
        for _ in range(10):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            jac = quat_rotation_jacobian(q)
            for a in range(4):
                e = np.zeros(4)
                e[a] = h
                fd = (quat_to_rotation(quat_normalize(q + e)) - quat_to_rotation(quat_normalize(q - e))) / (2 * h)
                # chain: jac is ∂R/∂q̂; FD differentiates through normalization
                qn = q / np.linalg.norm(q)
                proj = (np.eye(4) - np.outer(qn, qn))[:, a]
                expected = np.einsum("bij,b->ij", quat_rotation_jacobian(qn), proj)
                assert np.allclose(fd, expected, atol=1e-5)


class TestPly:
    def test_roundtrip_all_degrees(self, tmp_path):
        for degree in range(4):
            cloud = random_cloud(n=17, seed=degree, sh_degree=degree)
            path = tmp_path / f"d{degree}.ply"
            save_ply(cloud, path)
            back = load_ply(path)
            assert back.sh_degree == degree
            assert np.allclose(back.positions, cloud.positions, atol=1e-6)
            assert np.allclose(back.rotations, cloud.rotations, atol=1e-6)
            assert np.allclose(back.log_scales, cloud.log_scales, atol=1e-6)
            assert np.allclose(back.opacity_logits, cloud.opacity_logits, atol=1e-6)
            assert np.allclose(back.sh, cloud.sh, atol=1e-6)

    def test_serialization_deterministic(self):
        cloud = random_cloud(n=5, seed=0)
        assert ply_bytes(cloud) == ply_bytes(cloud.copy())

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_bytes(b"not a ply\nend_header\n")
        with pytest.raises(ValueError):
            load_ply(p)


class TestCloudInvariants:
    def test_primitives_share_degree(self):
        a = prim(degree=1)
        b = prim(degree=2)
        with pytest.raises(ValueError):
            GaussianCloud.from_primitives([a, b])

    def test_rotation_normalization(self):
        cloud = random_cloud(n=8, seed=3)
        cloud.rotations *= 3.7
        cloud.normalize_rotations()
        assert np.allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0, atol=1e-12)
