"""Synthetic robust-benchmark generation: scenes, distractor injection, features.

Desk-scale stand-in for distractor-augmented multi-view captures: a known
Gaussian scene is rendered into clean ground-truth images from a camera ring,
solid geometric shapes are composited over a chosen fraction of training
views (the exact composited region becomes the ground-truth mask), and dense
feature maps are synthesized either from an oracle 3D field (distractor cells
orthogonal to scene cells by construction) or from patch color statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cameras import CameraIntrinsics, CameraPose, CameraView
from .dataset import SceneDataset, normalize_scene
from .gaussians import SH_C0, GaussianCloud
from .masking import FEATURE_CHANNELS, FEATURE_STRIDE, FeatureMap, feature_grid_shape
from .renderer import RenderConfig, RenderOutput, render

BACKGROUND = (1.0, 1.0, 1.0)

# Shape half-size range (fraction of the smaller image dimension), calibrated
# so injected distractors average ≈9.45% of the pixels at rate 0.3 and
# ≈28.34% at rate 1.0 (per-view occupancy ≈ 29% on perturbed views).
DEFAULT_SIZE_RANGE = (0.18, 0.30)

# circumradius multipliers equalizing expected area across shape types
_SHAPE_RADIUS_FACTOR = {"square": 1.0, "circle": 1.1, "triangle": 1.6}


@dataclass
class DistractorSpec:
    rate: float = 1.0
    shapes: tuple[str, ...] = ("square", "circle", "triangle")
    size_range: tuple[float, float] = DEFAULT_SIZE_RANGE
    max_shapes: int = 3
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.rate <= 1):
            raise ValueError("rate must be in (0, 1]")


def _look_at_pose(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> CameraPose:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-8:  # looking straight along up: pick an arbitrary right vector
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    return CameraPose(rotation=rot, translation=-rot @ center)


def _plane_texture(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smooth multi-frequency RGB texture on [0,1]² with values in ~[0.1, 0.9]."""
    r = 0.5 + 0.22 * np.sin(2 * np.pi * (2.1 * u + 0.3)) * np.cos(2 * np.pi * (1.7 * v))
    g = 0.5 + 0.22 * np.sin(2 * np.pi * (1.3 * u + 1.9 * v + 0.7))
    b = 0.5 + 0.22 * np.cos(2 * np.pi * (2.9 * v + 0.2)) * np.sin(2 * np.pi * (0.9 * u + 0.5))
    tex = np.stack([r, g, b], axis=-1)
    tex += 0.08 * np.sin(2 * np.pi * (5.3 * u + 4.1 * v))[..., None]
    return np.clip(tex, 0.05, 0.95)


def _ring_cameras(
    n_views: int, image_size: tuple[int, int], radius: float, height: float, fov_factor: float
) -> list[tuple[CameraIntrinsics, CameraPose]]:
    h, w = image_size
    fx = fov_factor * w
    intr = CameraIntrinsics(fx=fx, fy=fx, cx=w / 2.0, cy=h / 2.0, width=w, height=h)
    cams = []
    for i in range(n_views):
        phi = 2 * np.pi * i / n_views
        center = np.array([radius * np.cos(phi), radius * np.sin(phi), height])
        cams.append((intr, _look_at_pose(center, np.zeros(3))))
    return cams


def _plane_cloud(extent: float, grid_n: int, sh_degree: int) -> GaussianCloud:
    xs = np.linspace(-extent, extent, grid_n)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    pos = np.stack([gx.reshape(-1), gy.reshape(-1), np.zeros(grid_n * grid_n)], axis=1)
    spacing = xs[1] - xs[0]
    n = len(pos)
    log_scales = np.tile(
        np.log([0.75 * spacing, 0.75 * spacing, 0.01 * spacing]), (n, 1)
    )
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacity = np.full(n, 2.9444389791664403)  # sigmoid -> 0.95
    tex = _plane_texture((pos[:, 0] + extent) / (2 * extent), (pos[:, 1] + extent) / (2 * extent))
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (tex - 0.5) / SH_C0
    return GaussianCloud(pos, rot, log_scales, opacity, sh, sh_degree)


def _blob_cloud(rng: np.random.Generator, count: int, sh_degree: int) -> GaussianCloud:
    pos = rng.normal(scale=0.35, size=(count, 3))
    rot = rng.normal(size=(count, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.05, 0.16, size=(count, 3)))
    opacity = np.log(1 / rng.uniform(0.25, 0.85, size=count) - 1) * -1
    k = (sh_degree + 1) ** 2
    sh = np.zeros((count, k, 3))
    sh[:, 0, :] = (rng.uniform(0.15, 0.85, size=(count, 3)) - 0.5) / SH_C0
    if k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.04, size=(count, k - 1, 3))
    return GaussianCloud(pos, rot, log_scales, opacity, sh, sh_degree)


def generate_synthetic_scene(
    recipe: str = "plane",
    n_views: int = 12,
    image_size: int | tuple[int, int] = 96,
    seed: int = 0,
    sh_degree: int = 1,
    test_every: int = 8,
    render_cfg: RenderConfig | None = None,
) -> SceneDataset:
    """Build a known scene, render clean images, and record analytic surface points."""
    if n_views < 2:
        raise ValueError("need at least two views")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    rng = np.random.default_rng(seed)
    cfg = render_cfg or RenderConfig(background=BACKGROUND)

    if recipe == "plane":
        cams = _ring_cameras(n_views, image_size, radius=1.1, height=2.2, fov_factor=1.45)
        cloud = _plane_cloud(extent=1.15, grid_n=30, sh_degree=sh_degree)
        gs = np.linspace(-1.15, 1.15, 120)
        sx, sy = np.meshgrid(gs, gs, indexing="xy")
        surface = np.stack([sx.reshape(-1), sy.reshape(-1), np.zeros(sx.size)], axis=1)
    elif recipe == "blobs":
        cams = _ring_cameras(n_views, image_size, radius=1.6, height=0.9, fov_factor=1.3)
        cloud = _blob_cloud(rng, count=60, sh_degree=sh_degree)
        surface = None
    else:
        raise ValueError(f"unknown scene recipe {recipe!r}")

    # initial sparse points: surface samples with SfM-like jitter
    if recipe == "plane":
        n_pts = 600
        pick = rng.choice(len(surface), size=n_pts, replace=False)
        pts = surface[pick] + rng.normal(scale=0.01, size=(n_pts, 3))
        cols = _plane_texture((pts[:, 0] / 2.3 + 0.5), (pts[:, 1] / 2.3 + 0.5))
    else:
        pts = cloud.positions + rng.normal(scale=0.01, size=cloud.positions.shape)
        cols = np.clip(cloud.sh[:, 0, :] * SH_C0 + 0.5, 0, 1)

    views = []
    clean = {}
    for i, (intr, pose) in enumerate(cams):
        vid = f"v{i:03d}"
        shell = CameraView(vid, intr, pose, np.zeros((intr.height, intr.width, 3)))
        img = render(cloud, shell, cfg).color
        img = np.clip(img, 0.0, 1.0)
        views.append(CameraView(vid, intr, pose, img))
        clean[vid] = img

    ds = SceneDataset(
        views=views,
        initial_points=pts,
        initial_colors=cols,
        gt_masks={v.id: np.zeros(image_size, dtype=np.uint8) for v in views},
        clean_images=clean,
        surface_points=surface,
        gt_cloud=cloud,
        test_every=test_every,
    )
    ds, _ = normalize_scene(ds)
    # re-render after normalization so images exactly match the stored cloud
    views = []
    for v in ds.views:
        img = np.clip(render(ds.gt_cloud, v, cfg).color, 0.0, 1.0)
        views.append(CameraView(v.id, v.intrinsics, v.pose, img))
    ds.views = views
    ds.clean_images = {v.id: v.image.copy() for v in views}
    return ds


def add_floaters(
    ds: SceneDataset, fraction: float = 0.3, seed: int = 0, scale: float = 0.02
) -> GaussianCloud:
    """Seed the ground-truth cloud with floaters hovering near train-camera centers.

    ``fraction`` is the floater share of the returned cloud.  Each floater is a
    small opaque blob a short step in front of one training camera, so it is
    seen by very few views.
    """
    if ds.gt_cloud is None:
        raise ValueError("dataset has no ground-truth cloud")
    rng = np.random.default_rng(seed)
    base = ds.gt_cloud
    n_float = int(round(fraction / (1 - fraction) * len(base)))
    train = ds.train_views
    k = (base.sh_degree + 1) ** 2
    pos = np.empty((n_float, 3))
    sh = np.zeros((n_float, k, 3))
    for i in range(n_float):
        cam = train[int(rng.integers(len(train)))]
        step = rng.uniform(0.06, 0.14)
        jitter = rng.normal(scale=0.01, size=3)
        pos[i] = cam.pose.center + step * cam.pose.forward + jitter
        sh[i, 0, :] = (rng.uniform(0.1, 0.9, size=3) - 0.5) / SH_C0
    rot = np.tile([1.0, 0, 0, 0], (n_float, 1))
    log_scales = np.log(np.full((n_float, 3), scale) * rng.uniform(0.7, 1.3, size=(n_float, 3)))
    opacity = np.full(n_float, 2.2)  # sigmoid -> 0.9
    floats = GaussianCloud(pos, rot, log_scales, opacity, sh, base.sh_degree)
    return GaussianCloud(
        np.concatenate([base.positions, floats.positions]),
        np.concatenate([base.rotations, floats.rotations]),
        np.concatenate([base.log_scales, floats.log_scales]),
        np.concatenate([base.opacity_logits, floats.opacity_logits]),
        np.concatenate([base.sh, floats.sh]),
        base.sh_degree,
    )


# --- distractor injection -------------------------------------------------------


def _shape_mask(shape: str, h: int, w: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if shape == "square":
        return (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "triangle":
        # equilateral with circumradius r, rotated by `angle`
        verts = [
            (cx + r * math.cos(angle + 2 * math.pi * k / 3), cy + r * math.sin(angle + 2 * math.pi * k / 3))
            for k in range(3)
        ]
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            x0, y0 = verts[k]
            x1, y1 = verts[(k + 1) % 3]
            inside &= (xs - x0) * (y1 - y0) - (ys - y0) * (x1 - x0) >= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def inject_distractors(ds: SceneDataset, spec: DistractorSpec) -> SceneDataset:
    """Composite solid shapes over a `rate` fraction of the training views.

    Held-out evaluation views are never touched.  The composited region is
    recorded as the ground-truth distractor mask per view.
    """
    rng = np.random.default_rng(spec.seed)
    train_ids = [v.id for v in ds.train_views]
    n_perturb = min(len(train_ids), math.ceil(spec.rate * len(train_ids)))
    chosen = set(rng.choice(train_ids, size=n_perturb, replace=False).tolist())

    views = []
    masks = {}
    for v in ds.views:
        h, w = v.image.shape[:2]
        if v.id not in chosen:
            views.append(v)
            masks[v.id] = np.zeros((h, w), dtype=np.uint8)
            continue
        img = v.image.copy()
        union = np.zeros((h, w), dtype=bool)
        n_shapes = int(rng.integers(max(1, spec.max_shapes - 1), spec.max_shapes + 1))
        for _ in range(n_shapes):
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            r = rng.uniform(*spec.size_range) * min(h, w)
            r *= _SHAPE_RADIUS_FACTOR.get(shape, 1.0)
            cx = rng.uniform(0, w - 1)
            cy = rng.uniform(0, h - 1)
            angle = rng.uniform(0, 2 * math.pi)
            region = _shape_mask(shape, h, w, cx, cy, r, angle)
            img[region] = rng.uniform(0.0, 1.0, size=3)
            union |= region
        views.append(CameraView(v.id, v.intrinsics, v.pose, img))
        masks[v.id] = union.astype(np.uint8)

    return SceneDataset(
        views=views,
        initial_points=ds.initial_points,
        initial_colors=ds.initial_colors,
        gt_masks=masks,
        clean_images=ds.clean_images,
        surface_points=ds.surface_points,
        gt_cloud=ds.gt_cloud,
        test_every=ds.test_every,
    )


def distractor_pixel_fraction(ds: SceneDataset) -> float:
    """Mean fraction of distractor pixels across the training views."""
    fracs = [ds.gt_masks[v.id].mean() for v in ds.train_views]
    return float(np.mean(fracs))


# --- synthetic feature sources ----------------------------------------------------


class FeatureSource:
    """Provides dense features for dataset images and for rendered images."""

    def for_image(self, view_id: str) -> FeatureMap:
        raise NotImplementedError

    def for_render(self, view_id: str, rendered: RenderOutput) -> FeatureMap:
        raise NotImplementedError


class DictFeatureSource(FeatureSource):
    """File-backed maps: one dict for images, one for renders (keyed by view id)."""

    def __init__(self, image_maps: dict[str, FeatureMap], render_maps: dict[str, FeatureMap]):
        self.image_maps = image_maps
        self.render_maps = render_maps

    def for_image(self, view_id):
        return self.image_maps[view_id]

    def for_render(self, view_id, rendered):
        return self.render_maps[view_id]


def _cell_centers(h: int, w: int, stride: int) -> np.ndarray:
    hf, wf = feature_grid_shape(h, w, stride)
    js, is_ = np.meshgrid(np.arange(wf), np.arange(hf), indexing="xy")
    cx = np.minimum((js + 0.5) * stride - 0.5, w - 1)
    cy = np.minimum((is_ + 0.5) * stride - 0.5, h - 1)
    return np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)


class OracleFeatureSource(FeatureSource):
    """Multi-view-consistent features from a smooth random Fourier field over
    3D surface points; distractor-covered cells get unit vectors from an
    orthogonal subspace (scene field lives in channels [0, C/2), distractor
    fields in [C/2, C)), so scene-vs-distractor similarity is exactly zero.
    """

    def __init__(self, ds: SceneDataset, seed: int = 0, smoothness: float = 2.0,
                 alpha_min: float = 0.5, render_cfg: RenderConfig | None = None):
        self.ds = ds
        half = FEATURE_CHANNELS // 2
        rng = np.random.default_rng(seed)
        self.omega = rng.normal(scale=smoothness, size=(3, half))
        self.phase = rng.uniform(0, 2 * np.pi, size=half)
        self.omega_d = rng.normal(scale=4.0, size=(2, half))
        self.phase_d = rng.uniform(0, 2 * np.pi, size=half)
        self.alpha_min = alpha_min
        self.cfg = render_cfg or RenderConfig(background=BACKGROUND)
        self._gt_renders: dict[str, RenderOutput] = {}

    def _gt_render(self, view_id: str) -> RenderOutput:
        if view_id not in self._gt_renders:
            if self.ds.gt_cloud is None:
                raise ValueError("oracle features need the ground-truth cloud")
            self._gt_renders[view_id] = render(self.ds.gt_cloud, self.ds.view_by_id(view_id), self.cfg)
        return self._gt_renders[view_id]

    def _scene_cells(self, view: CameraView, rendered: RenderOutput) -> np.ndarray:
        h, w = view.image.shape[:2]
        centers = _cell_centers(h, w, FEATURE_STRIDE)
        hf, wf = feature_grid_shape(h, w, FEATURE_STRIDE)
        ui = np.clip(np.round(centers[:, 0]).astype(int), 0, w - 1)
        vi = np.clip(np.round(centers[:, 1]).astype(int), 0, h - 1)
        alpha = rendered.alpha[vi, ui]
        depth = np.where(alpha > 1e-12, rendered.depth[vi, ui] / np.maximum(alpha, 1e-12), 0.0)
        ok = (alpha >= self.alpha_min) & (depth > 1e-6)

        k = view.intrinsics
        p_cam = np.stack(
            [(centers[:, 0] - k.cx) / k.fx * depth, (centers[:, 1] - k.cy) / k.fy * depth, depth],
            axis=1,
        )
        world = (p_cam - view.pose.translation) @ view.pose.rotation
        feats = np.zeros((len(centers), FEATURE_CHANNELS))
        if ok.any():
            half = FEATURE_CHANNELS // 2
            raw = np.cos(world[ok] @ self.omega + self.phase)
            raw /= np.linalg.norm(raw, axis=1, keepdims=True)
            feats[np.nonzero(ok)[0], :half] = raw
        return feats.reshape(hf, wf, FEATURE_CHANNELS)

    def for_image(self, view_id):
        view = self.ds.view_by_id(view_id)
        grid = self._scene_cells(view, self._gt_render(view_id))
        mask = None if self.ds.gt_masks is None else self.ds.gt_masks.get(view_id)
        if mask is not None and mask.any():
            h, w = view.image.shape[:2]
            centers = _cell_centers(h, w, FEATURE_STRIDE)
            ui = np.clip(np.round(centers[:, 0]).astype(int), 0, w - 1)
            vi = np.clip(np.round(centers[:, 1]).astype(int), 0, h - 1)
            on_distractor = mask[vi, ui] != 0
            if on_distractor.any():
                half = FEATURE_CHANNELS // 2
                uv = centers[on_distractor] / np.array([w, h])
                raw = np.cos(uv @ self.omega_d + self.phase_d)
                raw /= np.linalg.norm(raw, axis=1, keepdims=True)
                flat = grid.reshape(-1, FEATURE_CHANNELS)
                idx = np.nonzero(on_distractor)[0]
                flat[idx] = 0.0
                flat[idx, half:] = raw
        return FeatureMap(grid=grid, stride=FEATURE_STRIDE)

    def for_render(self, view_id, rendered):
        view = self.ds.view_by_id(view_id)
        return FeatureMap(grid=self._scene_cells(view, rendered), stride=FEATURE_STRIDE)


class PhotometricFeatureSource(FeatureSource):
    """Weak realistic double: per-cell color mean/std statistics, tiled to C."""

    def __init__(self, ds: SceneDataset):
        self.ds = ds

    @staticmethod
    def features_of(image: np.ndarray) -> FeatureMap:
        h, w = image.shape[:2]
        hf, wf = feature_grid_shape(h, w, FEATURE_STRIDE)
        grid = np.zeros((hf, wf, FEATURE_CHANNELS))
        stats = np.zeros(6)
        for i in range(hf):
            for j in range(wf):
                cell = image[
                    i * FEATURE_STRIDE: min((i + 1) * FEATURE_STRIDE, h),
                    j * FEATURE_STRIDE: min((j + 1) * FEATURE_STRIDE, w),
                ]
                stats[:3] = cell.mean(axis=(0, 1)) - 0.5
                stats[3:] = cell.std(axis=(0, 1))
                vec = np.tile(stats, FEATURE_CHANNELS // 6)
                n = np.linalg.norm(vec)
                grid[i, j] = vec / n if n > 1e-12 else 0.0
        return FeatureMap(grid=grid, stride=FEATURE_STRIDE)

    def for_image(self, view_id):
        return self.features_of(self.ds.view_by_id(view_id).image)

    def for_render(self, view_id, rendered):
        return self.features_of(np.clip(rendered.color, 0, 1))


def synth_features(ds: SceneDataset, mode: str = "oracle_orthogonal", seed: int = 0) -> dict[str, FeatureMap]:
    """Per-view feature maps for the dataset images (test double for a real extractor)."""
    if mode == "oracle_orthogonal":
        src: FeatureSource = OracleFeatureSource(ds, seed=seed)
    elif mode == "photometric":
        src = PhotometricFeatureSource(ds)
    else:
        raise ValueError(f"unknown feature mode {mode!r}")
    return {v.id: src.for_image(v.id) for v in ds.views}


def feature_source(ds: SceneDataset, mode: str, seed: int = 0) -> FeatureSource:
    if mode == "oracle_orthogonal":
        return OracleFeatureSource(ds, seed=seed)
    if mode == "photometric":
        return PhotometricFeatureSource(ds)
    raise ValueError(f"unknown feature mode {mode!r}")
