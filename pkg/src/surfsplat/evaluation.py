"""Geometric and photometric evaluation: PSNR, chamfer distances, F1, mask IoU.

Nearest-neighbor queries go through an exact KD-tree; the test suite pins all
metrics against O(n²) brute force.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CameraView
from .gaussians import GaussianCloud
from .renderer import RenderConfig, render, render_depth_pointcloud
from .utils import parallel_map


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1/MSE) for [0,1] images; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ChamferResult:
    d2s: float
    s2d: float
    cd: float


def chamfer(a: np.ndarray, b: np.ndarray) -> ChamferResult:
    """Bidirectional chamfer: d2s = mean over b of NN distance to a,
    s2d = mean over a of NN distance to b, cd = their mean."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("point sets must be nonempty")
    d2s = float(cKDTree(a).query(b)[0].mean())
    s2d = float(cKDTree(b).query(a)[0].mean())
    return ChamferResult(d2s=d2s, s2d=s2d, cd=0.5 * (d2s + s2d))


@dataclass
class F1Result:
    precision: float
    recall: float
    f1: float


def f1_score(pred: np.ndarray, gt: np.ndarray, tau: float) -> F1Result:
    """Threshold-based surface precision/recall and their harmonic mean."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("point sets must be nonempty")
    precision = float((cKDTree(gt).query(pred)[0] <= tau).mean())
    recall = float((cKDTree(pred).query(gt)[0] <= tau).mean())
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return F1Result(precision=precision, recall=recall, f1=f1)


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of binary masks; two empty masks -> 1.0."""
    p = np.asarray(getattr(pred, "grid", pred)) != 0
    g = np.asarray(getattr(gt, "grid", gt)) != 0
    if p.shape != g.shape:
        raise ValueError("mask shapes differ")
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Average points per voxel cell; output ordered by cell key (deterministic)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0 or voxel <= 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_sorted = keys[order]
    pts_sorted = points[order]
    change = np.any(np.diff(keys_sorted, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    sums = np.add.reduceat(pts_sorted, starts, axis=0)
    counts = np.diff(np.concatenate([starts, [len(points)]]))
    return sums / counts[:, None]


def fused_surface_points(
    cloud: GaussianCloud,
    views: list[CameraView],
    cfg: RenderConfig | None = None,
    alpha_min: float = 0.5,
    voxel: float | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Backprojected rendered-depth points fused over views, voxel-downsampled."""
    cfg = cfg or RenderConfig()
    clouds = parallel_map(
        lambda v: render_depth_pointcloud(cloud, v, cfg, alpha_min=alpha_min), views, threads
    )
    pts = np.concatenate([c for c in clouds if len(c)], axis=0) if clouds else np.zeros((0, 3))
    if len(pts) == 0:
        return pts
    if voxel:
        pts = voxel_downsample(pts, voxel)
    return pts


def default_f1_tau(surface: np.ndarray) -> float:
    """1% of the ground-truth bounding-box diagonal."""
    lo = surface.min(axis=0)
    hi = surface.max(axis=0)
    return 0.01 * float(np.linalg.norm(hi - lo))


@dataclass
class EvalReport:
    psnr_mean: float
    per_view_psnr: dict[str, float]
    chamfer: ChamferResult | None
    f1: F1Result | None
    tau: float | None
    n_surface_points: int

    def lines(self) -> list[str]:
        fmt = lambda x: "inf" if math.isinf(x) else f"{x:.10g}"
        out = [f"psnr_mean = {fmt(self.psnr_mean)}"]
        if self.chamfer is not None:
            out += [
                f"d2s = {fmt(self.chamfer.d2s)}",
                f"s2d = {fmt(self.chamfer.s2d)}",
                f"cd = {fmt(self.chamfer.cd)}",
            ]
        if self.f1 is not None:
            out += [
                f"precision = {fmt(self.f1.precision)}",
                f"recall = {fmt(self.f1.recall)}",
                f"f1 = {fmt(self.f1.f1)}",
                f"tau = {fmt(self.tau)}",
            ]
        out.append(f"surface_points = {self.n_surface_points}")
        return out

    def write(self, path: str | Path, per_view_csv: str | Path | None = None) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")
        if per_view_csv is not None:
            rows = ["view,psnr"] + [
                f"{vid},{'inf' if math.isinf(p) else f'{p:.10g}'}"
                for vid, p in self.per_view_psnr.items()
            ]
            Path(per_view_csv).write_text("\n".join(rows) + "\n")


def evaluate_reconstruction(
    cloud: GaussianCloud,
    dataset,
    cfg: RenderConfig | None = None,
    tau: float | None = None,
    threads: int = 1,
) -> EvalReport:
    """Held-out PSNR plus chamfer/F1 of the fused depth point cloud vs ground truth."""
    cfg = cfg or RenderConfig()
    eval_views = dataset.test_views or dataset.views
    per_view = {}
    for v in eval_views:
        target = v.image
        if dataset.clean_images and v.id in dataset.clean_images:
            target = dataset.clean_images[v.id]
        per_view[v.id] = psnr(np.clip(render(cloud, v, cfg).color, 0, 1), target)
    finite = [p for p in per_view.values() if not math.isinf(p)]
    psnr_mean = math.inf if not finite else float(np.mean(finite))

    cres = fres = None
    n_pts = 0
    if dataset.surface_points is not None and len(dataset.surface_points):
        gt = dataset.surface_points
        t = default_f1_tau(gt) if tau is None else tau
        pred = fused_surface_points(
            cloud, dataset.train_views, cfg, voxel=t / 2.0, threads=threads
        )
        n_pts = len(pred)
        if n_pts:
            cres = chamfer(pred, gt)
            fres = f1_score(pred, gt, t)
        tau = t
    return EvalReport(psnr_mean, per_view, cres, fres, tau, n_pts)
