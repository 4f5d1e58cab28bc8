"""Two-stage training schedule: coarse reconstruction, distractor-mask
generation, masked retraining with the multi-view consistency loss, periodic
multi-view pruning, and final export.

The optimizer is per-group Adam mirroring the usual splatting recipe
(position lr decays exponentially and scales with the camera extent).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .cameras import CameraView, ViewGraph, pixel_plane_homographies, select_neighbors
from .dataset import SceneDataset
from .gaussians import SH_C0, GaussianCloud, quat_normalize
from .losses import (
    LossBreakdown,
    flatten_loss,
    mv_consistency_loss,
    reprojection_weight,
    rgb_loss,
    sample_mv_pixels,
    total_loss,
)
from .masking import (
    DistractorMask,
    MaskRefiner,
    refine_mask,
    multiview_vote,
    per_neighbor_mask,
    sample_prompts,
    save_mask,
)
from .pruning import apply_prune, compute_contribution, default_prune_threshold
from .renderer import GradientBuffer, RenderConfig, RenderOutput, render, render_backward
from .synthetic import DictFeatureSource, FeatureSource


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    sh_degree: int = 1
    coarse_iters: int = 700  # paper-scale: 7000
    full_iters: int = 3000  # paper-scale: 30000

    lr_position: float = 1.6e-4  # scaled by camera extent, exponential decay
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_sh: float = 2.5e-3

    densify_start: int = 60
    densify_interval: int = 100
    densify_stop_fraction: float = 0.8
    densify_grad_threshold: float = 4e-5
    densify_percent_dense: float = 0.01
    prune_opacity_min: float = 0.005
    opacity_reset_interval: int = 0  # 0 disables the global reset
    max_gaussians: int = 20000
    init_random_count: int = 1000

    mv_loss_start_iter: int = 150
    mv_samples: int = 4096
    mv_patch_radius: int = 5
    mv_alpha_min: float = 0.5
    lambda_flatten: float = 100.0
    lambda_mv: float = 0.2
    lambda_ssim: float = 0.2
    freeze_normal_path: bool = False

    delta_near: float = 0.5
    min_votes: int = 2
    n_prompts: int = 20
    component_min_prompts: int = 0
    mask_alpha_min: float = 0.5
    use_abs_cosine: bool = True

    delta_opacity: float = 0.5
    delta_prune: int = -1  # -1: min(8, ceil(views/2))
    mv_prune_interval: int = 600
    mv_prune_start: int = 300
    prune_reset_opacity: float = 0.01
    final_prune: bool = True

    max_neighbors: int = 8
    max_angle_deg: float = 60.0
    max_neighbor_dist: float = 1.5

    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tile_size: int = 16
    gaussian_cutoff: float = 3.0
    early_stop_T: float = 1e-4
    dtype: str = "float32"

    warm_start: bool = False
    test_every: int = 8
    threads: int = 1
    log_interval: int = 50

    def render_config(self) -> RenderConfig:
        return RenderConfig(
            tile_size=self.tile_size,
            gaussian_cutoff=self.gaussian_cutoff,
            early_stop_T=self.early_stop_T,
            background=self.background,
            dtype=np.float32 if self.dtype == "float32" else np.float64,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None) -> "TrainConfig":
        cfg = cls()
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set_key(key, value)
        for key, value in (overrides or {}).items():
            cfg.set_key(key, value)
        return cfg

    def set_key(self, key: str, value) -> None:
        spec = {f.name: f for f in fields(self)}
        if key not in spec:
            raise KeyError(f"unknown config key {key!r}")
        current = getattr(self, key)
        if isinstance(current, bool):
            parsed = str(value).strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        elif isinstance(current, tuple):
            parsed = tuple(float(x) for x in str(value).split(","))
        else:
            parsed = str(value)
        setattr(self, key, parsed)


def exponential_lr(initial: float, final: float, step: int, max_steps: int) -> float:
    if step >= max_steps or initial <= 0:
        return final
    t = step / max_steps
    return math.exp((1 - t) * math.log(initial) + t * math.log(max(final, 1e-300)))


_GROUPS = ("position", "rotation", "log_scale", "opacity", "sh")


class Adam:
    """Per-parameter-group Adam with accumulator reshaping on densify/prune."""

    def __init__(self, cloud: GaussianCloud, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(self._param(cloud, name)) for name in _GROUPS}
        self.v = {name: np.zeros_like(self._param(cloud, name)) for name in _GROUPS}

    @staticmethod
    def _param(cloud: GaussianCloud, name: str) -> np.ndarray:
        return {
            "position": cloud.positions,
            "rotation": cloud.rotations,
            "log_scale": cloud.log_scales,
            "opacity": cloud.opacity_logits,
            "sh": cloud.sh,
        }[name]

    @staticmethod
    def _grad(buf: GradientBuffer, name: str) -> np.ndarray:
        return {
            "position": buf.d_position,
            "rotation": buf.d_rotation,
            "log_scale": buf.d_log_scale,
            "opacity": buf.d_opacity_logit,
            "sh": buf.d_sh,
        }[name]

    def step(self, cloud: GaussianCloud, buf: GradientBuffer, lrs: dict[str, float]) -> None:
        self.step_count += 1
        bc1 = 1 - self.beta1**self.step_count
        bc2 = 1 - self.beta2**self.step_count
        for name in _GROUPS:
            g = self._grad(buf, name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = self._param(cloud, name)
            p -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def keep_rows(self, mask: np.ndarray) -> None:
        for name in _GROUPS:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]

    def append_rows(self, n_new: int) -> None:
        for name in _GROUPS:
            pad = np.zeros((n_new,) + self.m[name].shape[1:])
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])

    def reset_group(self, name: str) -> None:
        self.m[name][:] = 0.0
        self.v[name][:] = 0.0


@dataclass
class TrainState:
    cloud: GaussianCloud
    adam: Adam
    iteration: int
    view_graph: ViewGraph
    rng: np.random.Generator
    scene_extent: float
    grad_accum: np.ndarray
    grad_count: np.ndarray
    masks: dict[str, DistractorMask] | None = None
    renders: dict[str, RenderOutput] | None = None
    log_rows: list[tuple] = field(default_factory=list)

    def reset_densify_stats(self) -> None:
        self.grad_accum = np.zeros(len(self.cloud))
        self.grad_count = np.zeros(len(self.cloud))


def initialize_cloud(ds: SceneDataset, cfg: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    """From sparse points when present, else uniform random in the scene box."""
    if ds.initial_points is not None and len(ds.initial_points) > 0:
        pts = np.asarray(ds.initial_points, dtype=np.float64)
        cols = (
            np.asarray(ds.initial_colors, dtype=np.float64)
            if ds.initial_colors is not None
            else np.full_like(pts, 0.5)
        )
    else:
        extent = ds.camera_extent()
        center = ds.scene_center()
        pts = center + rng.uniform(-0.5, 0.5, size=(cfg.init_random_count, 3)) * extent
        cols = rng.uniform(0.2, 0.8, size=(cfg.init_random_count, 3))

    n = len(pts)
    if n >= 4:
        dists, _ = cKDTree(pts).query(pts, k=4)
        nn = np.sqrt(np.maximum((dists[:, 1:] ** 2).mean(axis=1), 1e-14))
    else:
        nn = np.full(n, 0.1)
    log_scales = np.tile(np.log(nn)[:, None], (1, 3))
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opacity = np.full(n, math.log(0.1 / 0.9))
    k = (cfg.sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (np.clip(cols, 0, 1) - 0.5) / SH_C0
    return GaussianCloud(pts, rot, log_scales, opacity, sh, cfg.sh_degree)


# --- single-iteration loss + gradient -------------------------------------------


def loss_and_grad(
    cloud: GaussianCloud,
    ref_view: CameraView,
    target: np.ndarray,
    cfg: TrainConfig,
    mask: np.ndarray | None = None,
    nbr_view: CameraView | None = None,
    nbr_mask: np.ndarray | None = None,
    sample_pixels: np.ndarray | None = None,
    w_repro: float = 1.0,
    ref_render: RenderOutput | None = None,
    rc: RenderConfig | None = None,
    mv_result=None,
    render_ctx=None,
) -> tuple[LossBreakdown, GradientBuffer]:
    """Full loss for one (view, neighbor) pair and its parameter gradients.

    ``w_repro`` is supplied by the caller and treated as a constant, so the
    same fixed inputs make this a pure function of the cloud parameters
    (which is what the finite-difference checks exercise).  A precomputed
    ``mv_result`` skips the internal multi-view evaluation.
    """
    rc = rc or cfg.render_config()
    out = ref_render if ref_render is not None else render(cloud, ref_view, rc)
    rgb = rgb_loss(out.color, target, mask, cfg.lambda_ssim)
    l_s, d_log_scale_flat = flatten_loss(cloud)

    mv = mv_result
    if (
        mv is None
        and nbr_view is not None
        and sample_pixels is not None
        and len(sample_pixels)
        and cfg.lambda_mv > 0
    ):
        mv = mv_consistency_loss(
            ref_view,
            nbr_view,
            out,
            sample_pixels,
            mask=mask,
            nbr_mask=nbr_mask,
            patch_radius=cfg.mv_patch_radius,
            alpha_min=cfg.mv_alpha_min,
            freeze_normal_path=cfg.freeze_normal_path,
        )
    mv_val = 0.0
    d_depth = d_normal = None
    if mv is not None and mv.valid_count:
        mv_val = mv.value
        scale = cfg.lambda_mv * w_repro
        d_depth = scale * mv.d_depth
        d_normal = scale * mv.d_normal

    breakdown = total_loss(
        rgb.value, l_s, mv_val, w_repro,
        pixel_count=rgb.pixel_count,
        lambda_flatten=cfg.lambda_flatten,
        lambda_mv=cfg.lambda_mv,
        all_masked=rgb.all_masked,
    )
    buf = render_backward(
        cloud, ref_view, rc,
        d_color=rgb.d_color, d_depth=d_depth, d_normal=d_normal, ctx=render_ctx,
    )
    buf.d_log_scale += cfg.lambda_flatten * d_log_scale_flat
    return breakdown, buf


def neighbor_reprojection_weight(
    ref_view: CameraView,
    nbr_view: CameraView,
    nbr_render: RenderOutput,
    ref_pixels: np.ndarray,
    nbr_pixels: np.ndarray,
    alpha_min: float = 0.5,
) -> tuple[float, float]:
    """(E_repro, w_repro) through the neighbor's own rendered local planes.

    The backward homography is built from the neighbor's rendered depth and
    normal at each corresponding pixel; consistent two-sided geometry gives
    E → 0 and w → 1.  Returns w = 1 when no correspondence has valid geometry.
    """
    if len(ref_pixels) == 0:
        return 0.0, 1.0
    h, w = nbr_render.alpha.shape
    ui = np.clip(np.round(nbr_pixels[:, 0]).astype(int), 0, w - 1)
    vi = np.clip(np.round(nbr_pixels[:, 1]).astype(int), 0, h - 1)
    alpha = nbr_render.alpha[vi, ui]
    ok = alpha >= alpha_min
    if not ok.any():
        return 0.0, 1.0
    depth = nbr_render.depth[vi[ok], ui[ok]] / alpha[ok]
    normals = nbr_render.normal[vi[ok], ui[ok]]
    ok2 = depth > 1e-6
    if not ok2.any():
        return 0.0, 1.0
    ctx = pixel_plane_homographies(
        nbr_view, ref_view, nbr_pixels[ok][ok2], depth[ok2], normals[ok2]
    )
    ok3 = np.abs(ctx.d_r) > 1e-9
    if not ok3.any():
        return 0.0, 1.0
    return reprojection_weight(ref_pixels[ok][ok2][ok3], nbr_pixels[ok][ok2][ok3], ctx.h[ok3])


# --- densification and opacity control -------------------------------------------


def densify_and_reset(state: TrainState, cfg: TrainConfig, do_reset: bool = False) -> dict:
    """Clone small / split large high-gradient Gaussians, prune faint ones,
    and optionally reset all opacities to <= 0.01.

    Returns a report dict with cloned/split/pruned counts.
    """
    cloud = state.cloud
    n = len(cloud)
    grads = state.grad_accum / np.maximum(state.grad_count, 1)
    high = grads > cfg.densify_grad_threshold
    max_scale = cloud.scales.max(axis=1)
    small = max_scale <= cfg.densify_percent_dense * state.scene_extent

    clone_mask = high & small
    split_mask = high & ~small
    room = cfg.max_gaussians - n
    if room <= 0:
        clone_mask[:] = False
        split_mask[:] = False
    elif int(clone_mask.sum()) + 2 * int(split_mask.sum()) > room:
        # not enough headroom: keep the highest-gradient candidates
        order = np.argsort(-grads)
        budget = room
        keep = np.zeros(n, dtype=bool)
        for i in order:
            cost = 2 if split_mask[i] else (1 if clone_mask[i] else 0)
            if cost and cost <= budget:
                keep[i] = True
                budget -= cost
        clone_mask &= keep
        split_mask &= keep

    parts = [
        {
            "positions": cloud.positions,
            "rotations": cloud.rotations,
            "log_scales": cloud.log_scales,
            "opacity_logits": cloud.opacity_logits,
            "sh": cloud.sh,
        }
    ]
    n_clone = int(clone_mask.sum())
    if n_clone:
        parts.append(
            {
                "positions": cloud.positions[clone_mask],
                "rotations": cloud.rotations[clone_mask],
                "log_scales": cloud.log_scales[clone_mask],
                "opacity_logits": cloud.opacity_logits[clone_mask],
                "sh": cloud.sh[clone_mask],
            }
        )
    n_split = int(split_mask.sum())
    if n_split:
        from .gaussians import quat_to_rotation

        idx = np.nonzero(split_mask)[0]
        r_q = quat_to_rotation(cloud.rotations[idx])
        s = cloud.scales[idx]
        for _ in range(2):
            samples = state.rng.standard_normal((n_split, 3)) * s
            child_pos = cloud.positions[idx] + np.einsum("nij,nj->ni", r_q, samples)
            parts.append(
                {
                    "positions": child_pos,
                    "rotations": cloud.rotations[idx],
                    "log_scales": cloud.log_scales[idx] - math.log(1.6),
                    "opacity_logits": cloud.opacity_logits[idx],
                    "sh": cloud.sh[idx],
                }
            )

    merged = {
        key: np.concatenate([p[key] for p in parts]) for key in parts[0]
    }
    new_cloud = GaussianCloud(sh_degree=cloud.sh_degree, **merged)
    state.adam.append_rows(len(new_cloud) - n)

    # split parents die; faint Gaussians die
    alive = np.ones(len(new_cloud), dtype=bool)
    alive[:n] &= ~split_mask
    alive &= new_cloud.opacities >= cfg.prune_opacity_min
    if not alive.any():
        alive[int(np.argmax(new_cloud.opacities))] = True
    pruned = int((~alive).sum()) - n_split

    state.cloud = new_cloud.subset(alive)
    state.adam.keep_rows(alive)

    if do_reset:
        reset_opacities(state, cfg)

    state.reset_densify_stats()
    return {"cloned": n_clone, "split": n_split, "pruned": pruned, "total": len(state.cloud)}


def reset_opacities(state: TrainState, cfg: TrainConfig) -> None:
    """Clamp every opacity to at most the reset value; clears Adam moments."""
    val = cfg.prune_reset_opacity
    logit = math.log(val / (1 - val))
    mask = state.cloud.opacities > val
    state.cloud.opacity_logits[mask] = logit
    state.adam.reset_group("opacity")


# --- stage runner ------------------------------------------------------------------


def _lrs(cfg: TrainConfig, extent: float, step: int, max_steps: int) -> dict[str, float]:
    return {
        "position": exponential_lr(
            cfg.lr_position * extent, cfg.lr_position_final * extent, step, max_steps
        ),
        "rotation": cfg.lr_rotation,
        "log_scale": cfg.lr_scale,
        "opacity": cfg.lr_opacity,
        "sh": cfg.lr_sh,
    }


def _run_stage(
    state: TrainState,
    ds: SceneDataset,
    cfg: TrainConfig,
    iters: int,
    stage: str,
    masks: dict[str, DistractorMask] | None,
    progress=None,
) -> None:
    rc = cfg.render_config()
    train_views = ds.train_views
    by_id = {v.id: v for v in train_views}
    order: list[int] = []

    for local_it in range(1, iters + 1):
        state.iteration += 1
        if not order:
            order = list(state.rng.permutation(len(train_views)))
        view = train_views[order.pop()]
        mask_grid = None
        if masks is not None and view.id in masks:
            mask_grid = masks[view.id].grid

        ref_render, render_ctx = render(state.cloud, view, rc, want_ctx=True)

        nbr_view = None
        nbr_mask_grid = None
        samples = None
        mv = None
        w_repro = 1.0
        use_mv = (
            stage == "full"
            and cfg.lambda_mv > 0
            and local_it >= cfg.mv_loss_start_iter
            and len(state.view_graph.neighbors(view.id)) > 0
        )
        if use_mv:
            nbr_ids = state.view_graph.neighbors(view.id)
            nbr_id = nbr_ids[int(state.rng.integers(len(nbr_ids)))]
            nbr_view = by_id[nbr_id]
            if masks is not None and nbr_id in masks:
                nbr_mask_grid = masks[nbr_id].grid
            samples = sample_mv_pixels(
                ref_render, mask_grid, state.rng,
                max_samples=cfg.mv_samples,
                patch_radius=cfg.mv_patch_radius,
                alpha_min=cfg.mv_alpha_min,
            )
            if len(samples):
                mv = mv_consistency_loss(
                    view, nbr_view, ref_render, samples,
                    mask=mask_grid, nbr_mask=nbr_mask_grid,
                    patch_radius=cfg.mv_patch_radius, alpha_min=cfg.mv_alpha_min,
                    freeze_normal_path=cfg.freeze_normal_path,
                )
                if mv.valid_count:
                    nbr_render = render(state.cloud, nbr_view, rc)
                    _, w_repro = neighbor_reprojection_weight(
                        view, nbr_view, nbr_render, mv.ref_pixels, mv.nbr_pixels,
                        alpha_min=cfg.mv_alpha_min,
                    )

        breakdown, buf = loss_and_grad(
            state.cloud, view, view.image, cfg,
            mask=mask_grid, nbr_view=nbr_view, nbr_mask=nbr_mask_grid,
            sample_pixels=samples, w_repro=w_repro, ref_render=ref_render, rc=rc,
            mv_result=mv, render_ctx=render_ctx,
        )

        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}")

        lrs = _lrs(cfg, state.scene_extent, local_it, iters)
        state.adam.step(state.cloud, buf, lrs)
        state.cloud.normalize_rotations()

        touched = buf.screen_grad_norm > 0
        state.grad_accum[touched] += buf.screen_grad_norm[touched]
        state.grad_count[touched] += 1

        state.log_rows.append(
            (
                state.iteration,
                breakdown.l_rgb,
                breakdown.l_s,
                breakdown.l_mv,
                breakdown.w_repro,
                breakdown.total,
                len(state.cloud),
            )
        )
        if progress is not None and (local_it % cfg.log_interval == 0 or local_it == iters):
            progress(stage, local_it, iters, breakdown, len(state.cloud))

        in_densify_window = cfg.densify_start <= local_it <= int(cfg.densify_stop_fraction * iters)
        if in_densify_window and local_it % cfg.densify_interval == 0:
            densify_and_reset(state, cfg)
        if cfg.opacity_reset_interval > 0 and local_it % cfg.opacity_reset_interval == 0:
            reset_opacities(state, cfg)
        if (
            stage == "full"
            and cfg.mv_prune_interval > 0
            and local_it >= cfg.mv_prune_start
            and local_it % cfg.mv_prune_interval == 0
        ):
            table = compute_contribution(
                state.cloud, train_views, rc, delta_opacity=cfg.delta_opacity, threads=cfg.threads
            )
            threshold = None if cfg.delta_prune < 0 else cfg.delta_prune
            state.cloud, _ = apply_prune(
                state.cloud, table, len(train_views), threshold,
                policy="reset_opacity", reset_value=cfg.prune_reset_opacity,
            )
            state.adam.reset_group("opacity")


def build_state(ds: SceneDataset, cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    cloud = initialize_cloud(ds, cfg, rng)
    graph = select_neighbors(
        ds.train_views, cfg.max_neighbors, cfg.max_angle_deg, cfg.max_neighbor_dist
    )
    state = TrainState(
        cloud=cloud,
        adam=Adam(cloud),
        iteration=0,
        view_graph=graph,
        rng=rng,
        scene_extent=ds.camera_extent(),
        grad_accum=np.zeros(len(cloud)),
        grad_count=np.zeros(len(cloud)),
    )
    return state


def train_coarse(ds: SceneDataset, cfg: TrainConfig, progress=None) -> TrainState:
    """Stage one: mask-free optimization of L_rgb + λ₁L_s, then per-view renders."""
    if len(ds.views) < 2:
        raise ValueError("need at least two views")
    state = build_state(ds, cfg)
    _run_stage(state, ds, cfg, cfg.coarse_iters, "coarse", masks=None, progress=progress)
    rc = cfg.render_config()
    state.renders = {v.id: render(state.cloud, v, rc) for v in ds.views}
    return state


def generate_masks(
    state: TrainState,
    ds: SceneDataset,
    features: FeatureSource | dict,
    refiner: MaskRefiner,
    cfg: TrainConfig,
    render_features: dict | None = None,
    out_dir: str | Path | None = None,
) -> dict[str, DistractorMask]:
    """Per-neighbor masks against rendered neighbors, vote, prompt, refine.

    ``features`` is a FeatureSource or a per-view dict of image FeatureMaps
    (then ``render_features`` must hold maps for the rendered images).
    Persists per-neighbor, voted, and refined stages when out_dir is given.
    """
    if state.renders is None:
        raise ValueError("coarse renders missing; run train_coarse first")
    if isinstance(features, dict):
        if render_features is None:
            raise ValueError("dict features need render_features for the rendered images")
        source: FeatureSource = DictFeatureSource(features, render_features)
    else:
        source = features

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    by_id = {v.id: v for v in ds.views}
    masks: dict[str, DistractorMask] = {}
    ss = np.random.SeedSequence(cfg.seed)
    train_views = ds.train_views
    fm_render_cache: dict[str, object] = {}

    for vi, view in enumerate(train_views):
        h, w = view.image.shape[:2]
        nbr_ids = state.view_graph.neighbors(view.id)
        if not nbr_ids:
            masks[view.id] = DistractorMask(np.zeros((h, w), dtype=np.uint8), "refined")
            continue
        fm_ref = source.for_image(view.id)
        geometry = state.renders[view.id]
        results = []
        nbr_views = []
        nbr_renders = []
        for nid in nbr_ids:
            if nid not in fm_render_cache:
                fm_render_cache[nid] = source.for_render(nid, state.renders[nid])
            res = per_neighbor_mask(
                view, by_id[nid], state.renders[nid], fm_ref, fm_render_cache[nid],
                geometry, delta_near=cfg.delta_near, alpha_min=cfg.mask_alpha_min,
                use_abs=cfg.use_abs_cosine,
            )
            results.append(res)
            nbr_views.append(by_id[nid])
            nbr_renders.append(state.renders[nid])
            if out is not None:
                save_mask(res.mask.grid, out / f"{view.id}__{nid}_per_neighbor.png")

        voted = multiview_vote(
            results, view, geometry, nbr_views, nbr_renders,
            min_votes=cfg.min_votes, alpha_min=cfg.mask_alpha_min,
        )
        prompts = None
        if voted.count > 0:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(vi,)))
            prompts = sample_prompts(voted, rng, n_positive=cfg.n_prompts)
        refined = refine_mask(
            refiner, view.id, view.image, prompts, voted,
            component_min_prompts=cfg.component_min_prompts,
        )
        masks[view.id] = refined
        if out is not None:
            save_mask(voted.grid, out / f"{view.id}_voted.png")
            save_mask(refined.grid, out / f"{view.id}_refined.png")

    return masks


def train_full(
    state: TrainState,
    ds: SceneDataset,
    masks: dict[str, DistractorMask] | None,
    cfg: TrainConfig,
    progress=None,
) -> GaussianCloud:
    """Stage two: fresh retraining with masked L_rgb, L_s and the weighted L_mv,
    multi-view opacity resets during training, and one remove-policy prune at
    the end."""
    if not cfg.warm_start:
        fresh = build_state(ds, cfg)
        # keep the (already advanced) rng so the two stages don't replay
        # identical random sequences
        fresh.rng = state.rng
        fresh.view_graph = state.view_graph
        state.cloud = fresh.cloud
        state.adam = fresh.adam
        state.grad_accum = fresh.grad_accum
        state.grad_count = fresh.grad_count
    state.masks = masks
    _run_stage(state, ds, cfg, cfg.full_iters, "full", masks=masks, progress=progress)

    if cfg.final_prune and len(state.cloud) > 1:
        rc = cfg.render_config()
        table = compute_contribution(
            state.cloud, ds.train_views, rc, delta_opacity=cfg.delta_opacity, threads=cfg.threads
        )
        threshold = None if cfg.delta_prune < 0 else cfg.delta_prune
        state.cloud, _ = apply_prune(
            state.cloud, table, len(ds.train_views), threshold, policy="remove"
        )
    return state.cloud


def write_training_log(state: TrainState, path: str | Path) -> None:
    rows = ["iteration,l_rgb,l_s,l_mv,w_repro,total,gaussian_count"]
    for r in state.log_rows:
        rows.append(
            f"{r[0]},{r[1]:.10g},{r[2]:.10g},{r[3]:.10g},{r[4]:.10g},{r[5]:.10g},{r[6]}"
        )
    Path(path).write_text("\n".join(rows) + "\n")
