"""Multi-view feature-consistency distractor masking.

Pipeline per reference view: warp every pixel into each neighbor through its
local tangent plane (from the coarse rendered depth/normal), compare dense
features of the reference image against features of the *rendered* neighbor,
flag dissimilar pixels, vote across neighbors, then refine with a pluggable
prompt-based segmenter.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .cameras import CameraView, pixel_plane_homographies
from .renderer import RenderOutput

log = logging.getLogger(__name__)

FEATURE_CHANNELS = 384
FEATURE_STRIDE = 14


def feature_grid_shape(height: int, width: int, stride: int = FEATURE_STRIDE) -> tuple[int, int]:
    return (-(-height // stride), -(-width // stride))  # ceil division


@dataclass
class FeatureMap:
    grid: np.ndarray  # (H_f, W_f, C)
    stride: int = FEATURE_STRIDE

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 3 or self.grid.shape[2] != FEATURE_CHANNELS:
            raise ValueError(f"feature grid must be H_f x W_f x {FEATURE_CHANNELS}")


@dataclass
class DistractorMask:
    grid: np.ndarray  # (H, W) uint8, 1 = distractor
    stage: str  # per_neighbor | voted | refined

    def __post_init__(self):
        self.grid = (np.asarray(self.grid) != 0).astype(np.uint8)

    @property
    def count(self) -> int:
        return int(self.grid.sum())


@dataclass
class PromptSet:
    positives: np.ndarray  # (n, 2) pixel coordinates (x, y) on suspected distractors
    negative: np.ndarray  # (2,) pixel coordinate on background


# --- feature access ---------------------------------------------------------------


def _grid_coords(fm: FeatureMap, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Image pixels -> continuous feature-cell coordinates, border clamped.

    Cell (i, j) is centered at pixel ((j + 0.5)·stride − 0.5, (i + 0.5)·stride − 0.5).
    """
    hf, wf, _ = fm.grid.shape
    gx = np.clip((pts[..., 0] + 0.5) / fm.stride - 0.5, 0.0, wf - 1.0)
    gy = np.clip((pts[..., 1] + 0.5) / fm.stride - 0.5, 0.0, hf - 1.0)
    return gx, gy


def bilinear_features(fm: FeatureMap, pts: np.ndarray) -> np.ndarray:
    """Bilinearly interpolated feature vectors at image pixels, shape (..., C)."""
    hf, wf, _ = fm.grid.shape
    gx, gy = _grid_coords(fm, np.asarray(pts, dtype=np.float64))
    x0 = np.clip(np.floor(gx).astype(int), 0, max(wf - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(hf - 2, 0))
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    fx = (gx - x0)[..., None]
    fy = (gy - y0)[..., None]
    g = fm.grid
    top = g[y0, x0] * (1 - fx) + g[y0, x1] * fx
    bot = g[y1, x0] * (1 - fx) + g[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def bilinear_feature(fm: FeatureMap, pixel: np.ndarray) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    h_img_max = fm.grid.shape[0] * fm.stride
    w_img_max = fm.grid.shape[1] * fm.stride
    if not (0 <= pixel[0] < w_img_max and 0 <= pixel[1] < h_img_max):
        raise ValueError(f"pixel {pixel} outside the image covered by this feature map")
    return bilinear_features(fm, pixel[None, :])[0]


def _bilinear_corners(fm: FeatureMap, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner-cell indices (P, 4) and bilinear weights (P, 4) per point."""
    hf, wf, _ = fm.grid.shape
    gx, gy = _grid_coords(fm, pts)
    x0 = np.clip(np.floor(gx).astype(int), 0, max(wf - 2, 0))
    y0 = np.clip(np.floor(gy).astype(int), 0, max(hf - 2, 0))
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    fx = gx - x0
    fy = gy - y0
    idx = np.stack([y0 * wf + x0, y0 * wf + x1, y1 * wf + x0, y1 * wf + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def interpolated_similarity(
    fm_a: FeatureMap, pts_a: np.ndarray, fm_b: FeatureMap, pts_b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity between bilinear features at paired points.

    Works through cell Gram matrices instead of materializing per-pixel
    feature vectors (the interpolation is linear, so every dot product is a
    weighted sum of cell-cell dot products).  Returns (cosines, nonzero-norm
    mask); cosine is 0 where either interpolated vector has zero norm.
    """
    a = fm_a.grid.reshape(-1, fm_a.grid.shape[2])
    b = fm_b.grid.reshape(-1, fm_b.grid.shape[2])
    gram_ab = a @ b.T
    gram_aa = a @ a.T
    gram_bb = b @ b.T
    ia, wa = _bilinear_corners(fm_a, np.asarray(pts_a, dtype=np.float64))
    ib, wb = _bilinear_corners(fm_b, np.asarray(pts_b, dtype=np.float64))

    def quad(gram, i1, w1, i2, w2):
        n2 = gram.shape[1]
        flat = gram.ravel()
        acc = np.zeros(len(i1))
        for i in range(4):
            base = i1[:, i] * n2
            wi = w1[:, i]
            for j in range(4):
                acc += wi * w2[:, j] * flat[base + i2[:, j]]
        return acc

    dot = quad(gram_ab, ia, wa, ib, wb)
    na2 = quad(gram_aa, ia, wa, ia, wa)
    nb2 = quad(gram_bb, ib, wb, ib, wb)
    ok = (na2 > 1e-24) & (nb2 > 1e-24)
    cos = np.zeros(len(dot))
    cos[ok] = dot[ok] / np.sqrt(na2[ok] * nb2[ok])
    return cos, ok


def feature_similarity(f_r: np.ndarray, f_n: np.ndarray, use_abs: bool = True) -> float:
    na = np.linalg.norm(f_r)
    nb = np.linalg.norm(f_n)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("feature vectors must be nonzero")
    c = float(np.dot(f_r, f_n) / (na * nb))
    return abs(c) if use_abs else c


# --- per-view detection -------------------------------------------------------------


@dataclass
class PerNeighborResult:
    mask: DistractorMask
    observed: np.ndarray  # (H, W) bool: pixel warped into the neighbor with valid geometry


def _normalized_depth(render: RenderOutput, alpha_min: float) -> tuple[np.ndarray, np.ndarray]:
    valid = (render.alpha >= alpha_min) & (render.depth > 0)
    depth = np.where(valid, render.depth / np.maximum(render.alpha, 1e-12), 0.0)
    return depth, valid


def per_neighbor_mask(
    ref: CameraView,
    nbr: CameraView,
    nbr_rendered: RenderOutput,
    fm_ref: FeatureMap,
    fm_nbr_rendered: FeatureMap,
    geometry: RenderOutput,
    delta_near: float = 0.5,
    alpha_min: float = 0.5,
    use_abs: bool = True,
) -> PerNeighborResult:
    """Flag reference pixels whose feature disagrees with the warped neighbor.

    A pixel warping outside the neighbor frame (or lacking valid geometry) is
    "unknown": never flagged, and excluded from vote denominators.
    """
    h, w = geometry.alpha.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pixels = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)

    depth, valid = _normalized_depth(geometry, alpha_min)
    depth = depth.reshape(-1)
    valid = valid.reshape(-1)
    normals = geometry.normal.reshape(-1, 3)

    ctx = pixel_plane_homographies(ref, nbr, pixels, depth, normals)
    valid &= np.abs(ctx.d_r) > 1e-9
    r = np.einsum("vab,vb->va", ctx.h, np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1))
    wz = r[:, 2]
    valid &= np.abs(wz) > 1e-12
    wz = np.where(np.abs(wz) < 1e-12, 1.0, wz)
    q = r[:, :2] / wz[:, None]

    hn, wn = nbr.intrinsics.height, nbr.intrinsics.width
    observed = valid & (q[:, 0] >= 0) & (q[:, 0] <= wn - 1) & (q[:, 1] >= 0) & (q[:, 1] <= hn - 1)

    flagged = np.zeros(h * w, dtype=bool)
    if observed.any():
        sim, nz = interpolated_similarity(fm_ref, pixels[observed], fm_nbr_rendered, q[observed])
        if use_abs:
            sim = np.abs(sim)
        obs_flag = nz & (sim < delta_near)
        flagged[np.nonzero(observed)[0][obs_flag]] = True
        observed_out = observed.copy()
        observed_out[np.nonzero(observed)[0][~nz]] = False
    else:
        observed_out = observed

    return PerNeighborResult(
        DistractorMask(flagged.reshape(h, w), "per_neighbor"),
        observed_out.reshape(h, w),
    )


def multiview_vote(
    per_neighbor: list[PerNeighborResult],
    ref_view: CameraView,
    ref_geometry: RenderOutput,
    neighbor_views: list[CameraView],
    neighbor_renders: list[RenderOutput],
    min_votes: int = 2,
    alpha_min: float = 0.5,
    depth_rel_tol: float = 0.05,
) -> DistractorMask:
    """Keep pixels flagged by >= min_votes neighbors that actually see them.

    Visibility: the pixel's backprojected 3D point must land in the neighbor's
    frustum with relative depth error below ``depth_rel_tol`` against the
    neighbor's rendered depth.
    """
    h, w = ref_geometry.alpha.shape
    if not per_neighbor:
        return DistractorMask(np.zeros((h, w), dtype=np.uint8), "voted")

    ys, xs = np.mgrid[0:h, 0:w]
    depth, valid = _normalized_depth(ref_geometry, alpha_min)
    k = ref_view.intrinsics
    p_cam = np.stack(
        [(xs - k.cx) / k.fx * depth, (ys - k.cy) / k.fy * depth, depth], axis=-1
    ).reshape(-1, 3)
    world = (p_cam - ref_view.pose.translation) @ ref_view.pose.rotation
    valid = valid.reshape(-1)

    votes = np.zeros(h * w, dtype=np.int32)
    for res, nview, nrender in zip(per_neighbor, neighbor_views, neighbor_renders):
        kn = nview.intrinsics
        pc = world @ nview.pose.rotation.T + nview.pose.translation
        z = pc[:, 2]
        vis = valid & (z > 1e-6)
        zs = np.where(vis, z, 1.0)
        u = kn.fx * pc[:, 0] / zs + kn.cx
        v = kn.fy * pc[:, 1] / zs + kn.cy
        vis &= (u >= 0) & (u <= kn.width - 1) & (v >= 0) & (v <= kn.height - 1)
        ui = np.clip(np.round(u).astype(int), 0, kn.width - 1)
        vi = np.clip(np.round(v).astype(int), 0, kn.height - 1)
        ndepth, nvalid = _normalized_depth(nrender, alpha_min)
        vis &= nvalid[vi, ui]
        vis &= np.abs(z - ndepth[vi, ui]) / zs < depth_rel_tol
        votes += (res.mask.grid.reshape(-1) != 0) & res.observed.reshape(-1) & vis

    return DistractorMask((votes >= min_votes).reshape(h, w), "voted")


# --- prompt sampling and refinement ---------------------------------------------------


def sample_prompts(
    mask: DistractorMask, rng_seed: int | np.random.Generator, n_positive: int = 20
) -> PromptSet:
    """Uniformly sample positive prompts on the mask and one negative off it.

    Without replacement when the mask has enough pixels, with replacement
    otherwise (keeps the prompt-set shape fixed for refiner interfaces).
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    rows, cols = np.nonzero(mask.grid)
    if len(rows) == 0:
        raise ValueError("cannot sample prompts from an empty mask")
    replace = len(rows) < n_positive
    pick = rng.choice(len(rows), size=n_positive, replace=replace)
    positives = np.stack([cols[pick], rows[pick]], axis=1)

    zrows, zcols = np.nonzero(mask.grid == 0)
    if len(zrows) == 0:
        raise ValueError("mask covers the whole image; no background for a negative prompt")
    j = int(rng.integers(len(zrows)))
    negative = np.array([zcols[j], zrows[j]])
    return PromptSet(positives=positives, negative=negative)


class MaskRefiner:
    """Boundary refinement interface: image + prompts (+ coarse mask) -> mask grid."""

    def refine(
        self, view_id: str, image: np.ndarray, prompts: PromptSet, coarse: np.ndarray
    ) -> np.ndarray:
        raise NotImplementedError


class PassThroughRefiner(MaskRefiner):
    def refine(self, view_id, image, prompts, coarse):
        return coarse


class FloodFillRefiner(MaskRefiner):
    """Test double: grow color-similar regions from the positive prompts."""

    def __init__(self, color_tol: float = 0.02):
        self.color_tol = color_tol

    def refine(self, view_id, image, prompts, coarse):
        h, w, _ = image.shape
        out = np.zeros((h, w), dtype=bool)
        nx, ny = int(prompts.negative[0]), int(prompts.negative[1])
        for x, y in {(int(px), int(py)) for px, py in prompts.positives}:
            seed_color = image[y, x]
            similar = np.max(np.abs(image - seed_color), axis=2) <= self.color_tol
            labels, _ = ndimage.label(similar)
            region = labels == labels[y, x]
            if region[ny, nx]:
                continue
            out |= region
        return out.astype(np.uint8)


class FileMaskRefiner(MaskRefiner):
    """Loads refined masks produced offline (e.g. by the feature exporter)."""

    def __init__(self, directory: str | Path, pattern: str = "{view_id}.png"):
        self.directory = Path(directory)
        self.pattern = pattern

    def refine(self, view_id, image, prompts, coarse):
        path = self.directory / self.pattern.format(view_id=view_id)
        mask = load_mask(path)
        if mask.shape != image.shape[:2]:
            raise ValueError(f"mask {path} shape {mask.shape} != image {image.shape[:2]}")
        return mask


def refine_mask(
    refiner: MaskRefiner,
    view_id: str,
    image: np.ndarray,
    prompts: PromptSet | None,
    voted: DistractorMask,
    component_min_prompts: int = 0,
) -> DistractorMask:
    """Delegate boundary refinement; fall back to the voted mask on failure.

    With ``component_min_prompts`` > 0, a refined connected component is kept
    only if it contains at least that many positive prompts.
    """
    if prompts is None:
        return DistractorMask(voted.grid.copy(), "refined")
    try:
        grid = refiner.refine(view_id, image, prompts, voted.grid.copy())
    except Exception as exc:  # refiner failure is survivable
        log.warning("mask refiner failed for view %s (%s); keeping voted mask", view_id, exc)
        return DistractorMask(voted.grid.copy(), "refined")

    grid = (np.asarray(grid) != 0).astype(np.uint8)
    if component_min_prompts > 0 and grid.any():
        labels, n = ndimage.label(grid)
        hits = np.zeros(n + 1, dtype=int)
        for x, y in prompts.positives:
            hits[labels[int(y), int(x)]] += 1
        keep = hits >= component_min_prompts
        keep[0] = False
        grid = keep[labels].astype(np.uint8)
    return DistractorMask(grid, "refined")


# --- file formats ----------------------------------------------------------------------

_MVFM_MAGIC = b"MVFM"


def write_feature_map(path: str | Path, fm: FeatureMap) -> None:
    hf, wf, c = fm.grid.shape
    with open(path, "wb") as f:
        f.write(_MVFM_MAGIC)
        f.write(struct.pack("<IIII", hf, wf, c, fm.stride))
        f.write(np.ascontiguousarray(fm.grid, dtype="<f4").tobytes())


def read_feature_map(path: str | Path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if raw[:4] != _MVFM_MAGIC:
        raise ValueError(f"not a feature-map file: {path}")
    hf, wf, c, stride = struct.unpack("<IIII", raw[4:20])
    grid = np.frombuffer(raw, dtype="<f4", count=hf * wf * c, offset=20).reshape(hf, wf, c)
    return FeatureMap(grid=grid.astype(np.float64), stride=stride)


def save_mask(grid: np.ndarray, path: str | Path) -> None:
    """8-bit single-channel PNG/PGM, 255 = distractor."""
    arr = ((np.asarray(grid) != 0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return (np.asarray(img) >= 128).astype(np.uint8)


def write_prompts(path: str | Path, prompts: PromptSet) -> None:
    """One `x y label` line per prompt; label 1 = positive, 0 = negative."""
    lines = [f"{int(x)} {int(y)} 1" for x, y in prompts.positives]
    lines.append(f"{int(prompts.negative[0])} {int(prompts.negative[1])} 0")
    Path(path).write_text("\n".join(lines) + "\n")


def read_prompts(path: str | Path) -> PromptSet:
    pos, neg = [], None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y, label = line.split()
        if int(label) == 1:
            pos.append((int(x), int(y)))
        else:
            neg = np.array([int(x), int(y)])
    if neg is None:
        raise ValueError("prompt file has no negative prompt")
    return PromptSet(positives=np.array(pos, dtype=int).reshape(-1, 2), negative=neg)
