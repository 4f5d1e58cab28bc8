import numpy as np
import pytest

from surfsplat.cameras import CameraIntrinsics, CameraPose, CameraView
from surfsplat.gaussians import GaussianCloud


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(scale=0.5, size=3))


def look_at_pose(center, target) -> CameraPose:
    center = np.asarray(center, dtype=np.float64)
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(x) < 1e-8:
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return CameraPose(rot, -rot @ center)


def make_view(vid="v", fx=100.0, fy=100.0, cx=32.0, cy=32.0, size=64, pose=None, image=None):
    intr = CameraIntrinsics(fx, fy, cx, cy, size, size)
    pose = pose if pose is not None else CameraPose(np.eye(3), np.zeros(3))
    img = image if image is not None else np.zeros((size, size, 3))
    return CameraView(vid, intr, pose, img)


def random_cloud(n=50, seed=1, sh_degree=1, depth_center=2.0) -> GaussianCloud:
    """Random scene in front of an origin camera looking +z."""
    rng = np.random.default_rng(seed)
    pos = rng.normal(scale=0.3, size=(n, 3)) + [0, 0, depth_center]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ls = np.log(rng.uniform(0.03, 0.12, size=(n, 3)))
    op = rng.normal(scale=1.0, size=n)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.normal(scale=0.4, size=(n, 3))
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.05, size=(n, k - 1, 3))
    return GaussianCloud(pos, q, ls, op, sh, sh_degree)


@pytest.fixture(scope="session")
def plane_dataset_64():
    from surfsplat.synthetic import generate_synthetic_scene

    return generate_synthetic_scene("plane", n_views=12, image_size=64, seed=0)
