"""Pinhole cameras, plane-induced cross-view warps, and neighbor selection.

Conventions used throughout the package:

* World frame is right-handed; the camera frame has x right, y down,
  z forward (along the optical axis, into the scene).
* Poses are world-to-camera: ``x_cam = R @ x_world + t``.
* Pixel coordinates are (u, v) = (column, row); the pixel at row r,
  column c has continuous coordinate (c, r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EPS_DEPTH = 1e-6


class GeometryError(ValueError):
    """Degenerate geometric configuration (behind camera, plane through center, ...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def matrix_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _freeze(np.asarray(self.rotation)))
        object.__setattr__(self, "translation", _freeze(np.asarray(self.translation).reshape(3)))
        r = self.rotation
        if r.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-9:
            raise ValueError("rotation must be orthonormal (RᵀR = I within 1e-9)")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis direction in world coordinates (third rotation row)."""
        return self.rotation[2]


@dataclass(frozen=True)
class CameraView:
    id: str
    intrinsics: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != (self.intrinsics.height, self.intrinsics.width, 3):
            raise ValueError(
                f"image shape {img.shape} does not match intrinsics "
                f"{self.intrinsics.height}x{self.intrinsics.width}x3"
            )
        object.__setattr__(self, "image", _freeze(img))


@dataclass(frozen=True)
class ViewGraph:
    """Per-view ordered neighbor lists plus the criteria they were built with."""

    edges: dict[str, tuple[str, ...]]
    max_neighbors: int = 8
    max_angle_deg: float = 60.0
    max_dist: float = 1.5

    def neighbors(self, view_id: str) -> tuple[str, ...]:
        return self.edges.get(view_id, ())


def project_point(p_world: np.ndarray, view: CameraView) -> tuple[np.ndarray, float]:
    """Project a world point; returns (pixel (u, v), camera-frame depth).

    The pixel may lie outside the image bounds; callers check.
    Raises GeometryError when the point is at or behind the camera plane.
    """
    p_cam = view.pose.rotation @ np.asarray(p_world, dtype=np.float64) + view.pose.translation
    z = float(p_cam[2])
    if z <= EPS_DEPTH:
        raise GeometryError(f"point behind camera (depth {z:.3e})")
    k = view.intrinsics
    pixel = np.array([k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy])
    return pixel, z


def backproject_pixel(pixel: np.ndarray, depth: float, view: CameraView) -> np.ndarray:
    """Inverse of project_point: pixel + camera-frame depth -> world point."""
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    k = view.intrinsics
    u, v = float(pixel[0]), float(pixel[1])
    p_cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return view.pose.rotation.T @ (p_cam - view.pose.translation)


def relative_pose(ref: CameraPose, nbr: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Relative transform ref-camera-frame -> nbr-camera-frame: x_n = R x_r + t."""
    r_nr = nbr.rotation @ ref.rotation.T
    t_rn = nbr.translation - r_nr @ ref.translation
    return r_nr, t_rn


def plane_homography(
    ref: CameraView,
    nbr: CameraView,
    normal_ref: np.ndarray,
    plane_dist: float,
    eps: float = 1e-9,
) -> np.ndarray:
    """Homography mapping ref pixels to nbr pixels for points on a plane.

    The plane is given in the reference camera frame by n·x = d where n is
    ``normal_ref`` (unit) and d is ``plane_dist``, the signed distance from the
    reference camera center along n.  With the relative pose x_n = R x_r + t,

        H = K_n (R + t nᵀ / d) K_r⁻¹

    which is exact for every point on the plane (pinned by the round-trip
    property tests; see warp_pixel).
    """
    n = np.asarray(normal_ref, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) >= 1e-6:
        raise ValueError("normal_ref must be a unit vector")
    if abs(plane_dist) < eps:
        raise GeometryError("plane passes through the reference camera center")
    r_nr, t_rn = relative_pose(ref.pose, nbr.pose)
    h = nbr.intrinsics.matrix @ (r_nr + np.outer(t_rn, n) / plane_dist) @ ref.intrinsics.matrix_inv
    return h


def warp_pixel(h: np.ndarray, pixel: np.ndarray) -> np.ndarray:
    """Apply a homography to a pixel (homogeneous transform + dehomogenize)."""
    p = np.asarray(h, dtype=np.float64) @ np.array([pixel[0], pixel[1], 1.0])
    if abs(p[2]) < 1e-12:
        raise GeometryError("warped pixel at infinity")
    return p[:2] / p[2]


def select_neighbors(
    views: list[CameraView],
    max_neighbors: int = 8,
    max_angle_deg: float = 60.0,
    max_dist: float = 1.5,
) -> ViewGraph:
    """Pick, per view, up to max_neighbors views within the angle/distance caps.

    Neighbors are sorted by camera-center distance ascending.  A view may end
    up with zero neighbors; multi-view stages must treat it as unsupervised.
    """
    if len(views) < 2:
        raise ValueError("need at least two views")
    centers = np.stack([v.pose.center for v in views])
    forwards = np.stack([v.pose.forward for v in views])
    cos_max = math.cos(math.radians(max_angle_deg))
    edges: dict[str, tuple[str, ...]] = {}
    for i, view in enumerate(views):
        d = np.linalg.norm(centers - centers[i], axis=1)
        cos_ang = np.clip(forwards @ forwards[i], -1.0, 1.0)
        ok = (d <= max_dist) & (cos_ang >= cos_max - 1e-12)
        ok[i] = False
        idx = np.nonzero(ok)[0]
        idx = idx[np.argsort(d[idx], kind="stable")][:max_neighbors]
        edges[view.id] = tuple(views[j].id for j in idx)
    return ViewGraph(edges=edges, max_neighbors=max_neighbors, max_angle_deg=max_angle_deg, max_dist=max_dist)


@dataclass
class PixelPlaneHomographies:
    """Per-pixel plane-induced homographies plus the intermediates their
    gradient chain needs (consumed by the multi-view loss backward pass)."""

    h: np.ndarray  # (V, 3, 3)
    n_hat: np.ndarray  # (V, 3) unit plane normal in the ref camera frame
    nu: np.ndarray  # (V,) normal norm before renormalization
    fallback: np.ndarray  # (V,) bool, normal fell back to the view ray
    r_hat: np.ndarray  # (V, 3) K⁻¹ rays
    depth: np.ndarray  # (V,)
    dot: np.ndarray  # (V,) n̂·r̂
    d_r: np.ndarray  # (V,) signed plane distance
    t_rn: np.ndarray  # (3,)
    k_n: np.ndarray
    k_r_inv: np.ndarray
    rot_ref: np.ndarray


def pixel_plane_homographies(
    ref: CameraView,
    nbr: CameraView,
    pixels: np.ndarray,
    depth: np.ndarray,
    n_world: np.ndarray,
) -> PixelPlaneHomographies:
    """Batch plane_homography from per-pixel rendered depth and world normals.

    Normals are renormalized; near-zero ones fall back to the direction from
    the surface toward the camera.  Entries with |d_r| below 1e-9 are
    degenerate; callers filter on ``d_r``.
    """
    r_nr, t_rn = relative_pose(ref.pose, nbr.pose)
    k_r_inv = ref.intrinsics.matrix_inv
    k_n = nbr.intrinsics.matrix

    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    v = len(pixels)
    ptil = np.concatenate([pixels, np.ones((v, 1))], axis=1)
    r_hat = ptil @ k_r_inv.T

    n_cam = np.asarray(n_world, dtype=np.float64).reshape(v, 3) @ ref.pose.rotation.T
    nu = np.linalg.norm(n_cam, axis=1)
    fallback = nu < 1e-8
    ray_unit = r_hat / np.linalg.norm(r_hat, axis=1, keepdims=True)
    n_hat = np.where(fallback[:, None], -ray_unit, n_cam / np.maximum(nu, 1e-8)[:, None])

    dot = np.einsum("vi,vi->v", n_hat, r_hat)
    depth = np.asarray(depth, dtype=np.float64).reshape(v)
    d_r = depth * dot
    d_safe = np.where(np.abs(d_r) < 1e-12, 1.0, d_r)
    b = r_nr[None] + t_rn[None, :, None] * n_hat[:, None, :] / d_safe[:, None, None]
    h = np.einsum("ab,vbc,dc->vad", k_n, b, k_r_inv.T)
    return PixelPlaneHomographies(
        h, n_hat, nu, fallback, r_hat, depth, dot, d_r, t_rn, k_n, k_r_inv, ref.pose.rotation
    )


def warp_pixels_batch(h: np.ndarray, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply per-pixel homographies (V,3,3) to pixels (V,2); returns (warped, w-component)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    ptil = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    r = np.einsum("vab,vb->va", h, ptil)
    wz = np.where(np.abs(r[:, 2]) < 1e-12, np.nan, r[:, 2])
    return r[:, :2] / wz[:, None], r[:, 2]


# --- camera manifest I/O -----------------------------------------------------
#
# One view per non-comment line, whitespace separated:
#   id image_filename fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 t0 t1 t2
# '#' starts a comment.  Numbers are decimal text at full float precision.


@dataclass(frozen=True)
class CameraRecord:
    id: str
    image_file: str
    intrinsics: CameraIntrinsics
    pose: CameraPose


def write_camera_manifest(records: list[CameraRecord], path: str | Path) -> None:
    lines = ["# id image fx fy cx cy width height r00..r22 t0 t1 t2"]
    for rec in records:
        k = rec.intrinsics
        nums = [k.fx, k.fy, k.cx, k.cy]
        fields = [rec.id, rec.image_file] + [repr(float(x)) for x in nums]
        fields += [str(k.width), str(k.height)]
        fields += [repr(float(x)) for x in rec.pose.rotation.reshape(-1)]
        fields += [repr(float(x)) for x in rec.pose.translation]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera_manifest(path: str | Path) -> list[CameraRecord]:
    records = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 20:
            raise ValueError(f"malformed camera manifest line ({len(parts)} fields): {raw!r}")
        vid, image_file = parts[0], parts[1]
        fx, fy, cx, cy = (float(x) for x in parts[2:6])
        width, height = int(parts[6]), int(parts[7])
        rot = np.array([float(x) for x in parts[8:17]]).reshape(3, 3)
        t = np.array([float(x) for x in parts[17:20]])
        records.append(
            CameraRecord(
                id=vid,
                image_file=image_file,
                intrinsics=CameraIntrinsics(fx, fy, cx, cy, width, height),
                pose=CameraPose(rot, t),
            )
        )
    return records
