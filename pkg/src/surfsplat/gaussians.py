"""Gaussian surfel primitives: parameterization, covariance, screen projection.

A cloud is stored struct-of-arrays (positions, quaternions, log scales,
opacity logits, SH coefficients); ``GaussianPrimitive`` is the single-element
view used by the scalar operations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraView, GeometryError, EPS_DEPTH

SCALE_MIN = 1e-6
SCALE_MAX = 1e3

# Real spherical harmonic constants, bands 0..3 (3DGS ordering).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


# --- quaternions --------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix/matrices (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """∂R/∂q̂ for unit quaternion(s): shape (..., 4, 3, 3), index a gives ∂R/∂q̂_a."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    j = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    j[..., 0, :, :] = 2 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=-1
    ).reshape(q.shape[:-1] + (3, 3))
    j[..., 1, :, :] = 2 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1
    ).reshape(q.shape[:-1] + (3, 3))
    j[..., 2, :, :] = 2 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=-1
    ).reshape(q.shape[:-1] + (3, 3))
    j[..., 3, :, :] = 2 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=-1
    ).reshape(q.shape[:-1] + (3, 3))
    return j


# --- spherical harmonics ------------------------------------------------------


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (..., (degree+1)²)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(cols, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """∂basis/∂direction, shape (..., (degree+1)², 3).

    Partials of the raw polynomials; the caller chains through direction
    normalization.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows = [np.stack([zero, zero, zero], axis=-1)]
    if degree >= 1:
        rows += [
            np.stack([zero, -SH_C1 * one, zero], axis=-1),
            np.stack([zero, zero, SH_C1 * one], axis=-1),
            np.stack([-SH_C1 * one, zero, zero], axis=-1),
        ]
    if degree >= 2:
        rows += [
            np.stack([SH_C2[0] * y, SH_C2[0] * x, zero], axis=-1),
            np.stack([zero, SH_C2[1] * z, SH_C2[1] * y], axis=-1),
            np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], axis=-1),
            np.stack([SH_C2[3] * z, zero, SH_C2[3] * x], axis=-1),
            np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero], axis=-1),
        ]
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            np.stack([SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero], axis=-1),
            np.stack([SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y], axis=-1),
            np.stack(
                [SH_C3[2] * (-2 * x * y), SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z],
                axis=-1,
            ),
            np.stack(
                [SH_C3[3] * (-6 * x * z), SH_C3[3] * (-6 * y * z), SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)],
                axis=-1,
            ),
            np.stack(
                [SH_C3[4] * (4 * zz - 3 * xx - yy), SH_C3[4] * (-2 * x * y), SH_C3[4] * 8 * x * z],
                axis=-1,
            ),
            np.stack([SH_C3[5] * 2 * x * z, SH_C3[5] * (-2 * y * z), SH_C3[5] * (xx - yy)], axis=-1),
            np.stack([SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * (-6 * x * y), zero], axis=-1),
        ]
    return np.stack(rows, axis=-2)


# --- primitives and clouds ----------------------------------------------------


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray  # (3,)
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    log_scale: np.ndarray  # (3,)
    opacity_logit: float
    sh: np.ndarray  # ((degree+1)², 3)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1

    @property
    def scale(self) -> np.ndarray:
        return clamp_scale(np.exp(np.asarray(self.log_scale, dtype=np.float64)))

    @property
    def opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


def clamp_scale(s: np.ndarray) -> np.ndarray:
    return np.clip(s, SCALE_MIN, SCALE_MAX)


class GaussianCloud:
    """Ordered collection of Gaussian surfels, stored struct-of-arrays."""

    def __init__(
        self,
        positions: np.ndarray,
        rotations: np.ndarray,
        log_scales: np.ndarray,
        opacity_logits: np.ndarray,
        sh: np.ndarray,
        sh_degree: int,
    ):
        n = len(positions)
        k = (sh_degree + 1) ** 2
        # own every array: parameters are optimized in place and must never
        # alias caller data
        self.positions = np.array(positions, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.array(sh, dtype=np.float64).reshape(n, k, 3)
        self.sh_degree = sh_degree

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianCloud":
        k = (sh_degree + 1) ** 2
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, k, 3)), sh_degree,
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], sh_degree: int | None = None) -> "GaussianCloud":
        if not prims:
            return cls.empty(sh_degree if sh_degree is not None else 1)
        deg = prims[0].sh_degree if sh_degree is None else sh_degree
        if any(p.sh_degree != deg for p in prims):
            raise ValueError("all primitives must share the same SH degree")
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.rotation for p in prims]),
            np.stack([p.log_scale for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.sh for p in prims]),
            deg,
        )

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].copy(),
            self.rotations[i].copy(),
            self.log_scales[i].copy(),
            float(self.opacity_logits[i]),
            self.sh[i].copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.sh_degree,
        )

    def subset(self, mask_or_index: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.positions[mask_or_index], self.rotations[mask_or_index],
            self.log_scales[mask_or_index], self.opacity_logits[mask_or_index],
            self.sh[mask_or_index], self.sh_degree,
        )

    @property
    def scales(self) -> np.ndarray:
        return clamp_scale(np.exp(self.log_scales))

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def normalize_rotations(self) -> None:
        self.rotations = quat_normalize(self.rotations)


# --- scalar operations --------------------------------------------------------


def covariance_3d(g: GaussianPrimitive) -> np.ndarray:
    """Σ = R S Sᵀ Rᵀ with S = diag(clamped exp(log_scale))."""
    r = quat_to_rotation(g.rotation)
    m = r * g.scale  # columns scaled: R @ diag(s)
    return m @ m.T


def evaluate_gaussian(g: GaussianPrimitive, x: np.ndarray) -> float:
    """Unnormalized density exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)); 1 at the mean."""
    d = np.asarray(x, dtype=np.float64) - g.position
    sol = np.linalg.solve(covariance_3d(g), d)
    return float(np.exp(-0.5 * d @ sol))


def perspective_jacobian(p_cam: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """First-order Jacobian of (u, v) w.r.t. the camera-frame point at p_cam."""
    x, y, z = p_cam
    return np.array(
        [[fx / z, 0.0, -fx * x / z**2], [0.0, fy / z, -fy * y / z**2]]
    )


def min_axis_index(scales: np.ndarray) -> int:
    """Index of the minimum-scale axis; ties break to the lowest index."""
    return int(np.argmin(scales))


def project_gaussian(
    g: GaussianPrimitive, view: CameraView
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Project to screen space: (μ′, Σ′ 2×2, depth, camera-frame unit normal).

    Σ′ is the exact first-order pushforward J W Σ Wᵀ Jᵀ (no low-pass
    dilation; the rasterizer adds its own).  The normal is the rotation
    column of the minimum-scale axis, sign-flipped so n_cam·z < 0.
    """
    rot_wc = view.pose.rotation
    p_cam = rot_wc @ g.position + view.pose.translation
    z = float(p_cam[2])
    if z <= EPS_DEPTH:
        raise GeometryError(f"gaussian behind camera (depth {z:.3e})")
    k = view.intrinsics
    mu2d = np.array([k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy])
    jac = perspective_jacobian(p_cam, k.fx, k.fy)
    cov_cam = rot_wc @ covariance_3d(g) @ rot_wc.T
    cov2d = jac @ cov_cam @ jac.T

    axis = min_axis_index(g.scale)
    n_world = quat_to_rotation(g.rotation)[:, axis]
    n_cam = rot_wc @ n_world
    if n_cam[2] > 0:
        n_cam = -n_cam
    return mu2d, cov2d, z, n_cam


def sh_to_color(g: GaussianPrimitive, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate SH color for a unit view direction; +0.5 offset, clamped to [0,1]."""
    basis = sh_basis(view_dir, g.sh_degree)
    return np.clip(basis @ g.sh + 0.5, 0.0, 1.0)


# --- PLY I/O (community 3DGS attribute layout) --------------------------------


def _ply_property_names(sh_degree: int) -> list[str]:
    n_rest = ((sh_degree + 1) ** 2 - 1) * 3
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_ply(cloud: GaussianCloud, path: str | Path) -> None:
    Path(path).write_bytes(ply_bytes(cloud))


def ply_bytes(cloud: GaussianCloud) -> bytes:
    """Serialize to a binary little-endian PLY with the 3DGS per-point layout.

    Raw parameters are stored (logit opacity, log scales, unnormalized
    quaternion); f_rest is channel-major over the higher SH coefficients.
    """
    n = len(cloud)
    names = _ply_property_names(cloud.sh_degree)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    k = (cloud.sh_degree + 1) ** 2
    dc = cloud.sh[:, 0, :]  # (n, 3)
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, (k - 1) * 3)  # channel-major
    data = np.concatenate(
        [
            cloud.positions,
            np.zeros((n, 3)),
            dc,
            rest,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.rotations,
        ],
        axis=1,
    ).astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + data.tobytes()


def load_ply(path: str | Path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "format binary_little_endian 1.0" not in header[1]:
        raise ValueError("expected a binary little-endian PLY file")
    n = 0
    names: list[str] = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            names.append(line.split()[-1])
        elif line.startswith("property"):
            raise ValueError(f"unsupported property type: {line!r}")
    data = np.frombuffer(raw, dtype="<f4", count=n * len(names), offset=end)
    data = data.reshape(n, len(names)).astype(np.float64)
    col = {name: i for i, name in enumerate(names)}

    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise ValueError("f_rest count must be divisible by 3")
    k = n_rest // 3 + 1
    degree = int(round(np.sqrt(k))) - 1
    if degree < 0 or degree > 3 or (degree + 1) ** 2 != k:
        raise ValueError(f"f_rest count {n_rest} does not match an SH degree <= 3")

    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = data[:, [col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]]]
    if k > 1:
        rest = data[:, [col[f"f_rest_{i}"] for i in range(n_rest)]]
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianCloud(
        positions=data[:, [col["x"], col["y"], col["z"]]],
        rotations=data[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]],
        log_scales=data[:, [col["scale_0"], col["scale_1"], col["scale_2"]]],
        opacity_logits=data[:, col["opacity"]],
        sh=sh,
        sh_degree=degree,
    )
