"""Scene dataset container, directory layout I/O, and scale normalization.

Directory layout:

    cameras.txt          camera manifest (see cameras.write_camera_manifest)
    images/<id>.png      training/evaluation images
    clean/<id>.png       distractor-free ground truth (synthetic scenes)
    masks_gt/<id>.png    ground-truth distractor masks (255 = distractor)
    points3d.txt         initial sparse points: x y z r g b per line
    surface_gt.txt       ground-truth surface samples: x y z per line
    features/<id>.mvfm   optional dense feature maps
    gt_cloud.ply         optional generating Gaussian cloud (synthetic scenes)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import CameraPose, CameraRecord, CameraView, read_camera_manifest, write_camera_manifest
from .gaussians import GaussianCloud, load_ply, save_ply
from .utils import load_image, save_image


@dataclass
class SceneDataset:
    views: list[CameraView]
    initial_points: np.ndarray | None = None  # (N, 3)
    initial_colors: np.ndarray | None = None  # (N, 3) in [0, 1]
    gt_masks: dict[str, np.ndarray] | None = None
    clean_images: dict[str, np.ndarray] | None = None
    surface_points: np.ndarray | None = None  # (M, 3)
    gt_cloud: GaussianCloud | None = None
    test_every: int = 8

    @property
    def train_views(self) -> list[CameraView]:
        if self.test_every <= 0:
            return list(self.views)
        return [v for i, v in enumerate(self.views) if i % self.test_every != 0]

    @property
    def test_views(self) -> list[CameraView]:
        if self.test_every <= 0:
            return []
        return [v for i, v in enumerate(self.views) if i % self.test_every == 0]

    def view_by_id(self, view_id: str) -> CameraView:
        for v in self.views:
            if v.id == view_id:
                return v
        raise KeyError(view_id)

    def scene_center(self) -> np.ndarray:
        if self.initial_points is not None and len(self.initial_points) > 0:
            return self.initial_points.mean(axis=0)
        return np.stack([v.pose.center for v in self.views]).mean(axis=0)

    def camera_extent(self) -> float:
        """Radius of the camera-center bounding sphere (learning-rate scale)."""
        centers = np.stack([v.pose.center for v in self.views])
        centroid = centers.mean(axis=0)
        return float(np.linalg.norm(centers - centroid, axis=1).max()) * 1.1


def normalize_scene(ds: SceneDataset) -> tuple[SceneDataset, float]:
    """Rescale so camera-center-to-scene-center distances average to 1.

    Makes the neighbor-selection distance cap (1.5) and related constants
    portable across capture scales.  Returns (scaled dataset, scale factor).
    """
    center = ds.scene_center()
    dists = [np.linalg.norm(v.pose.center - center) for v in ds.views]
    mean = float(np.mean(dists))
    if mean <= 0:
        return ds, 1.0
    s = 1.0 / mean

    def scale_points(p):
        return None if p is None else np.asarray(p) * s

    views = [
        CameraView(
            id=v.id,
            intrinsics=v.intrinsics,
            pose=CameraPose(v.pose.rotation, v.pose.translation * s),
            image=v.image,
        )
        for v in ds.views
    ]
    cloud = None
    if ds.gt_cloud is not None:
        cloud = ds.gt_cloud.copy()
        cloud.positions *= s
        cloud.log_scales = cloud.log_scales + np.log(s)
    return (
        SceneDataset(
            views=views,
            initial_points=scale_points(ds.initial_points),
            initial_colors=ds.initial_colors,
            gt_masks=ds.gt_masks,
            clean_images=ds.clean_images,
            surface_points=scale_points(ds.surface_points),
            gt_cloud=cloud,
            test_every=ds.test_every,
        ),
        s,
    )


def save_dataset(ds: SceneDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for v in ds.views:
        save_image(v.image, out / "images" / f"{v.id}.png")
        records.append(CameraRecord(v.id, f"images/{v.id}.png", v.intrinsics, v.pose))
    write_camera_manifest(records, out / "cameras.txt")

    if ds.initial_points is not None:
        colors = ds.initial_colors
        if colors is None:
            colors = np.full_like(ds.initial_points, 0.5)
        lines = [
            " ".join(repr(float(x)) for x in np.concatenate([p, c]))
            for p, c in zip(ds.initial_points, colors)
        ]
        (out / "points3d.txt").write_text("\n".join(lines) + "\n")
    if ds.surface_points is not None:
        lines = [" ".join(repr(float(x)) for x in p) for p in ds.surface_points]
        (out / "surface_gt.txt").write_text("\n".join(lines) + "\n")
    if ds.clean_images:
        (out / "clean").mkdir(exist_ok=True)
        for vid, img in ds.clean_images.items():
            save_image(img, out / "clean" / f"{vid}.png")
    if ds.gt_masks:
        from .masking import save_mask

        (out / "masks_gt").mkdir(exist_ok=True)
        for vid, mask in ds.gt_masks.items():
            save_mask(mask, out / "masks_gt" / f"{vid}.png")
    if ds.gt_cloud is not None:
        save_ply(ds.gt_cloud, out / "gt_cloud.ply")


def load_dataset(path: str | Path, test_every: int = 8) -> SceneDataset:
    from .masking import load_mask

    root = Path(path)
    records = read_camera_manifest(root / "cameras.txt")
    views = [
        CameraView(r.id, r.intrinsics, r.pose, load_image(root / r.image_file)) for r in records
    ]

    def read_points(p: Path):
        if not p.exists():
            return None
        rows = [
            [float(x) for x in line.split()]
            for line in p.read_text().splitlines()
            if line.strip() and not line.startswith("#")
        ]
        return np.array(rows) if rows else None

    pts = read_points(root / "points3d.txt")
    initial_points = initial_colors = None
    if pts is not None:
        initial_points = pts[:, :3]
        initial_colors = pts[:, 3:6] if pts.shape[1] >= 6 else None
    surface = read_points(root / "surface_gt.txt")
    if surface is not None:
        surface = surface[:, :3]

    clean = None
    if (root / "clean").is_dir():
        clean = {
            v.id: load_image(root / "clean" / f"{v.id}.png")
            for v in views
            if (root / "clean" / f"{v.id}.png").exists()
        }
    masks = None
    if (root / "masks_gt").is_dir():
        masks = {}
        for v in views:
            p = root / "masks_gt" / f"{v.id}.png"
            masks[v.id] = load_mask(p) if p.exists() else np.zeros(v.image.shape[:2], dtype=np.uint8)
    cloud = load_ply(root / "gt_cloud.ply") if (root / "gt_cloud.ply").exists() else None

    return SceneDataset(
        views=views,
        initial_points=initial_points,
        initial_colors=initial_colors,
        gt_masks=masks,
        clean_images=clean,
        surface_points=surface,
        gt_cloud=cloud,
        test_every=test_every,
    )
