"""Forward and reverse-mode α-blended rendering of Gaussian surfel clouds.

Forward compositing per pixel, front to back over depth-sorted Gaussians:

    α_i = min(opacity_i · G_i(u | μ′_i, Σ′_i), 0.99)
    C   = Σ T_i α_i c_i + T_final · background,   T_i = Π_{j<i} (1 − α_j)
    D   = Σ T_i α_i z_i
    N   = Σ T_i α_i n_i            (world-frame normals, not renormalized)

Blending stops once transmittance falls below ``early_stop_T``.  The backward
pass reproduces the forward exactly and returns analytic partials of a scalar
loss with respect to every Gaussian parameter; finite differences are the
independent check (see the test suite).

Everything is computed in ``RenderConfig.dtype`` (float64 by default, float32
selectable); a Gaussian contributes only inside its rectangular cutoff box of
``gaussian_cutoff`` standard deviations, so output does not depend on the tile
schedule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import CameraView, EPS_DEPTH
from .gaussians import (
    GaussianCloud,
    SCALE_MAX,
    SCALE_MIN,
    perspective_jacobian,
    quat_normalize,
    quat_rotation_jacobian,
    quat_to_rotation,
    sh_basis,
    sh_basis_grad,
)

ALPHA_CLAMP = 0.99


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    gaussian_cutoff: float = 3.0  # standard deviations
    early_stop_T: float = 1e-4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_skip: float = 1.0 / 255.0  # contributions below this are dropped
    cov_dilation: float = 0.3  # low-pass added to the projected covariance diagonal
    dtype: type = np.float64

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.gaussian_cutoff <= 0:
            raise ValueError("gaussian_cutoff must be positive")


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), raw α-blend of camera-frame z
    normal: np.ndarray  # (H, W, 3), α-blended world-frame normals
    alpha: np.ndarray  # (H, W)
    per_gaussian_weight: np.ndarray  # (N,), Σ_pixels T_i α_i per Gaussian


@dataclass
class GradientBuffer:
    d_position: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4)
    d_log_scale: np.ndarray  # (N, 3)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, K, 3)
    screen_grad_norm: np.ndarray  # (N,), ‖∂loss/∂μ′‖ (densification statistic)

    @classmethod
    def zeros(cls, n: int, sh_coeffs: int) -> "GradientBuffer":
        return cls(
            np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
            np.zeros(n), np.zeros((n, sh_coeffs, 3)), np.zeros(n),
        )

    def add(self, other: "GradientBuffer") -> "GradientBuffer":
        self.d_position += other.d_position
        self.d_rotation += other.d_rotation
        self.d_log_scale += other.d_log_scale
        self.d_opacity_logit += other.d_opacity_logit
        self.d_sh += other.d_sh
        self.screen_grad_norm += other.screen_grad_norm
        return self


class _Projected:
    """Per-view projection of the visible Gaussians, depth-sorted.

    Holds every intermediate the backward pass needs.
    """

    def __init__(self, cloud: GaussianCloud, view: CameraView, cfg: RenderConfig):
        dt = cfg.dtype
        n = len(cloud)
        k = view.intrinsics
        rot_wc = view.pose.rotation.astype(dt)
        t_wc = view.pose.translation.astype(dt)
        pos = cloud.positions.astype(dt)

        p_cam = pos @ rot_wc.T + t_wc
        z = p_cam[:, 2]
        in_front = z > EPS_DEPTH

        idx = np.nonzero(in_front)[0]
        order = idx[np.argsort(z[idx], kind="stable")]

        self.cloud = cloud
        self.view = view
        self.cfg = cfg
        self.rot_wc = rot_wc
        self.ids = order  # original indices, front to back
        m = len(order)
        self.m = m
        if m == 0:
            return

        p_cam = p_cam[order]
        z = p_cam[:, 2]
        self.p_cam = p_cam
        self.z = z

        fx, fy = dt(k.fx), dt(k.fy)
        self.mean2d = np.stack(
            [fx * p_cam[:, 0] / z + dt(k.cx), fy * p_cam[:, 1] / z + dt(k.cy)], axis=1
        )

        # 3D covariance in the camera frame
        quats = quat_normalize(cloud.rotations[order]).astype(dt)
        r_q = quat_to_rotation(quats)
        s_raw = np.exp(cloud.log_scales[order].astype(dt))
        s = np.clip(s_raw, SCALE_MIN, SCALE_MAX)
        self.scale_unclamped = (s_raw > SCALE_MIN) & (s_raw < SCALE_MAX)
        self.r_q = r_q
        self.s = s
        m3 = r_q * s[:, None, :]
        cov_world = m3 @ m3.transpose(0, 2, 1)
        cov_cam = np.einsum("ij,njk,lk->nil", rot_wc, cov_world, rot_wc)
        self.cov_cam = cov_cam

        # projected 2x2 covariance with low-pass dilation
        jac = np.zeros((m, 2, 3), dtype=dt)
        jac[:, 0, 0] = fx / z
        jac[:, 0, 2] = -fx * p_cam[:, 0] / z**2
        jac[:, 1, 1] = fy / z
        jac[:, 1, 2] = -fy * p_cam[:, 1] / z**2
        self.jac = jac
        cov2d = np.einsum("nij,njk,nlk->nil", jac, cov_cam, jac)
        cov2d[:, 0, 0] += cfg.cov_dilation
        cov2d[:, 1, 1] += cfg.cov_dilation
        self.cov2d = cov2d

        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        self.degenerate = det <= 1e-12
        det = np.where(self.degenerate, 1.0, det)
        self.conic = np.stack(
            [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
        )

        mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
        disc = np.sqrt(np.maximum(mid**2 - det, 0.0))
        radius = cfg.gaussian_cutoff * np.sqrt(np.maximum(mid + disc, 0.0))
        self.x0 = np.floor(self.mean2d[:, 0] - radius)
        self.x1 = np.ceil(self.mean2d[:, 0] + radius)
        self.y0 = np.floor(self.mean2d[:, 1] - radius)
        self.y1 = np.ceil(self.mean2d[:, 1] + radius)
        self.onscreen = (
            (self.x1 >= 0) & (self.x0 <= k.width - 1)
            & (self.y1 >= 0) & (self.y0 <= k.height - 1)
            & ~self.degenerate
        )

        self.opacity = (1.0 / (1.0 + np.exp(-cloud.opacity_logits[order]))).astype(dt)

        # view-dependent color
        cam_center = (-rot_wc.T @ t_wc).astype(dt)
        wvec = pos[order] - cam_center
        self.wnorm = np.linalg.norm(wvec, axis=1)
        self.dirs = wvec / self.wnorm[:, None]
        self.basis = sh_basis(self.dirs, cloud.sh_degree).astype(dt)
        color_pre = np.einsum("nk,nkc->nc", self.basis, cloud.sh[order].astype(dt)) + 0.5
        self.color_unclamped = (color_pre > 0.0) & (color_pre < 1.0)
        self.color = np.clip(color_pre, 0.0, 1.0)

        # world-frame normal: min-scale axis column, sign-flipped toward the camera
        self.kmin = np.argmin(s, axis=1)
        ar = np.arange(m)
        n_world_raw = r_q[ar, :, self.kmin]
        n_cam_z = n_world_raw @ rot_wc[2]
        self.sign = np.where(n_cam_z > 0, -1.0, 1.0).astype(dt)
        self.n_world = self.sign[:, None] * n_world_raw


def _tile_blend(proj: _Projected, sel: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Blend the selected (depth-ordered) Gaussians over one tile's pixels.

    Returns (alpha_matrix, T_before, w, keep, T_last, gauss_vals) with shapes
    (G, P) except T_last (P,).
    """
    cfg = proj.cfg
    dx = px[None, :] - proj.mean2d[sel, 0][:, None]
    dy = py[None, :] - proj.mean2d[sel, 1][:, None]
    a = proj.conic[sel, 0][:, None]
    b = proj.conic[sel, 1][:, None]
    c = proj.conic[sel, 2][:, None]
    power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
    gauss = np.exp(power)
    inbox = (
        (px[None, :] >= proj.x0[sel][:, None]) & (px[None, :] <= proj.x1[sel][:, None])
        & (py[None, :] >= proj.y0[sel][:, None]) & (py[None, :] <= proj.y1[sel][:, None])
    )
    alpha = np.minimum(proj.opacity[sel][:, None] * gauss, ALPHA_CLAMP)
    alpha = np.where(inbox & (alpha >= cfg.alpha_skip), alpha, 0.0)

    one_minus = 1.0 - alpha
    t_incl = np.cumprod(one_minus, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1]), dtype=alpha.dtype), t_incl[:-1]])
    keep = t_before >= cfg.early_stop_T
    w = np.where(keep, t_before * alpha, 0.0)

    not_kept = ~keep
    any_nk = not_kept.any(axis=0)
    first_nk = np.argmax(not_kept, axis=0)
    cols = np.arange(alpha.shape[1])
    t_last = np.where(any_nk, t_before[first_nk, cols], t_incl[-1])
    return alpha, t_before, w, keep, t_last, gauss, (dx, dy)


def _tiles(height: int, width: int, tile: int):
    for ty in range(0, height, tile):
        for tx in range(0, width, tile):
            yield ty, min(ty + tile, height), tx, min(tx + tile, width)


def _tile_pixels(y0, y1, x0, x1, dtype):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.reshape(-1).astype(dtype), ys.reshape(-1).astype(dtype)


class RenderContext:
    """Projection plus per-tile blend intermediates, reusable by the backward pass."""

    def __init__(self, proj: _Projected):
        self.proj = proj
        self.tiles: list[tuple] = []  # (bounds, sel, px, py, blend-tuple)


def _tile_select(proj: _Projected, y0, y1, x0, x1) -> np.ndarray:
    return np.nonzero(
        proj.onscreen
        & (proj.x0 <= x1 - 1) & (proj.x1 >= x0)
        & (proj.y0 <= y1 - 1) & (proj.y1 >= y0)
    )[0]


def render(
    cloud: GaussianCloud,
    view: CameraView,
    cfg: RenderConfig | None = None,
    want_ctx: bool = False,
):
    cfg = cfg or RenderConfig()
    dt = cfg.dtype
    h, w_img = view.intrinsics.height, view.intrinsics.width
    bg = np.asarray(cfg.background, dtype=dt)

    color = np.tile(bg, (h, w_img, 1))
    depth = np.zeros((h, w_img), dtype=dt)
    normal = np.zeros((h, w_img, 3), dtype=dt)
    alpha_map = np.zeros((h, w_img), dtype=dt)
    pgw = np.zeros(len(cloud), dtype=dt)

    proj = _Projected(cloud, view, cfg)
    ctx = RenderContext(proj)
    out = RenderOutput(color, depth, normal, alpha_map, pgw)
    if proj.m == 0:
        return (out, ctx) if want_ctx else out

    for y0, y1, x0, x1 in _tiles(h, w_img, cfg.tile_size):
        sel = _tile_select(proj, y0, y1, x0, x1)
        if len(sel) == 0:
            continue
        px, py = _tile_pixels(y0, y1, x0, x1, dt)
        blend = _tile_blend(proj, sel, px, py)
        if want_ctx:
            ctx.tiles.append(((y0, y1, x0, x1), sel, px, py, blend))
        w = blend[2]
        t_last = blend[4]

        shape = (y1 - y0, x1 - x0)
        color[y0:y1, x0:x1] = (
            np.einsum("gp,gc->pc", w, proj.color[sel]) + t_last[:, None] * bg
        ).reshape(shape + (3,))
        depth[y0:y1, x0:x1] = (w * proj.z[sel][:, None]).sum(axis=0).reshape(shape)
        normal[y0:y1, x0:x1] = np.einsum("gp,gc->pc", w, proj.n_world[sel]).reshape(shape + (3,))
        alpha_map[y0:y1, x0:x1] = w.sum(axis=0).reshape(shape)
        pgw[proj.ids[sel]] += w.sum(axis=1)

    return (out, ctx) if want_ctx else out


def render_backward(
    cloud: GaussianCloud,
    view: CameraView,
    cfg: RenderConfig,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_normal: np.ndarray | None = None,
    d_alpha: np.ndarray | None = None,
    ctx: RenderContext | None = None,
) -> GradientBuffer:
    """Exact reverse-mode gradients of render() for per-pixel upstream partials.

    Passing the RenderContext from render(..., want_ctx=True) skips the
    forward recomputation.
    """
    dt = cfg.dtype
    h, w_img = view.intrinsics.height, view.intrinsics.width
    k_sh = (cloud.sh_degree + 1) ** 2
    buf = GradientBuffer.zeros(len(cloud), k_sh)

    proj = ctx.proj if ctx is not None else _Projected(cloud, view, cfg)
    if proj.m == 0:
        return buf

    gC = np.zeros((h, w_img, 3), dtype=dt) if d_color is None else d_color.astype(dt)
    gD = np.zeros((h, w_img), dtype=dt) if d_depth is None else d_depth.astype(dt)
    gN = np.zeros((h, w_img, 3), dtype=dt) if d_normal is None else d_normal.astype(dt)
    gA = np.zeros((h, w_img), dtype=dt) if d_alpha is None else d_alpha.astype(dt)
    bg = np.asarray(cfg.background, dtype=dt)

    m = proj.m
    g_mu2d = np.zeros((m, 2), dtype=dt)
    g_cov2d = np.zeros((m, 2, 2), dtype=dt)
    g_color = np.zeros((m, 3), dtype=dt)
    g_zpay = np.zeros(m, dtype=dt)
    g_nworld = np.zeros((m, 3), dtype=dt)
    g_opac = np.zeros(m, dtype=dt)

    if ctx is not None and ctx.tiles:
        tile_iter = ctx.tiles
    else:
        tile_iter = []
        for y0, y1, x0, x1 in _tiles(h, w_img, cfg.tile_size):
            sel = _tile_select(proj, y0, y1, x0, x1)
            if len(sel) == 0:
                continue
            px, py = _tile_pixels(y0, y1, x0, x1, dt)
            tile_iter.append(((y0, y1, x0, x1), sel, px, py, _tile_blend(proj, sel, px, py)))

    for (y0, y1, x0, x1), sel, px, py, blend in tile_iter:
        alpha, t_before, w, keep, t_last, gauss, (dx, dy) = blend

        gc = gC[y0:y1, x0:x1].reshape(-1, 3)
        gd = gD[y0:y1, x0:x1].reshape(-1)
        gn = gN[y0:y1, x0:x1].reshape(-1, 3)
        ga = gA[y0:y1, x0:x1].reshape(-1)

        # ∂loss/∂w_i = upstream · payload_i
        gu = (
            proj.color[sel] @ gc.T
            + proj.z[sel][:, None] * gd[None, :]
            + proj.n_world[sel] @ gn.T
            + ga[None, :]
        )
        wgu = w * gu
        # suffix sums: S_i = Σ_{k>i} w_k gu_k + T_last (upstream_color · bg)
        suffix = np.cumsum(wgu[::-1], axis=0)[::-1] - wgu
        suffix += (t_last * (gc @ bg))[None, :]
        one_minus = 1.0 - alpha
        d_alpha_blend = np.where(keep, t_before * gu - suffix / one_minus, 0.0)

        active = (alpha > 0.0) & (alpha < ALPHA_CLAMP) & keep
        d_gauss = np.where(active, d_alpha_blend * proj.opacity[sel][:, None], 0.0)
        g_opac_px = np.where(active, d_alpha_blend * gauss, 0.0)

        a = proj.conic[sel, 0][:, None]
        b = proj.conic[sel, 1][:, None]
        c = proj.conic[sel, 2][:, None]
        ad_x = a * dx + b * dy
        ad_y = b * dx + c * dy
        dg = d_gauss * gauss  # ∂loss/∂power · (−2) … folded below

        # ∂G/∂μ′ = G·(A d);  ∂G/∂Σ′ = ½ G (A d)(A d)ᵀ
        g_mu2d[sel, 0] += (dg * ad_x).sum(axis=1)
        g_mu2d[sel, 1] += (dg * ad_y).sum(axis=1)
        g_cov2d[sel, 0, 0] += 0.5 * (dg * ad_x * ad_x).sum(axis=1)
        g_cov2d[sel, 1, 1] += 0.5 * (dg * ad_y * ad_y).sum(axis=1)
        off = 0.5 * (dg * ad_x * ad_y).sum(axis=1)
        g_cov2d[sel, 0, 1] += off
        g_cov2d[sel, 1, 0] += off

        g_color[sel] += w @ gc
        g_zpay[sel] += (w * gd[None, :]).sum(axis=1)
        g_nworld[sel] += w @ gn
        g_opac[sel] += g_opac_px.sum(axis=1)

    # ---- geometric chain, vectorized over the projected Gaussians ----
    k_int = view.intrinsics
    fx, fy = dt(k_int.fx), dt(k_int.fy)
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]

    # SH color (through the [0,1] clamp and direction normalization)
    g_pre = g_color * proj.color_unclamped
    sh_sel = cloud.sh[proj.ids].astype(dt)
    g_sh = proj.basis[:, :, None] * g_pre[:, None, :]
    bgrad = sh_basis_grad(proj.dirs, cloud.sh_degree).astype(dt)
    g_dir = np.einsum("mkd,mkc,mc->md", bgrad, sh_sel, g_pre)
    g_wvec = (g_dir - proj.dirs * np.einsum("md,md->m", proj.dirs, g_dir)[:, None]) / proj.wnorm[:, None]
    g_mu_world = g_wvec.copy()

    # depth payload and projected mean
    g_pcam = np.zeros((m, 3), dtype=dt)
    g_pcam[:, 2] += g_zpay
    g_pcam[:, 0] += fx / z * g_mu2d[:, 0]
    g_pcam[:, 1] += fy / z * g_mu2d[:, 1]
    g_pcam[:, 2] += -fx * x / z**2 * g_mu2d[:, 0] - fy * y / z**2 * g_mu2d[:, 1]

    # projected covariance: Σ′ = J V Jᵀ
    g_v = np.einsum("maj,mab,mbk->mjk", proj.jac, g_cov2d, proj.jac)
    g_jac = 2.0 * np.einsum("mab,mbj,mjk->mak", g_cov2d, proj.jac, proj.cov_cam)
    g_pcam[:, 0] += -fx / z**2 * g_jac[:, 0, 2]
    g_pcam[:, 1] += -fy / z**2 * g_jac[:, 1, 2]
    g_pcam[:, 2] += (
        -fx / z**2 * g_jac[:, 0, 0]
        - fy / z**2 * g_jac[:, 1, 1]
        + 2 * fx * x / z**3 * g_jac[:, 0, 2]
        + 2 * fy * y / z**3 * g_jac[:, 1, 2]
    )
    g_mu_world += g_pcam @ proj.rot_wc

    # camera-frame cov -> world cov -> rotation and scales
    g_cov_world = np.einsum("ji,mjk,kl->mil", proj.rot_wc, g_v, proj.rot_wc)
    m3 = proj.r_q * proj.s[:, None, :]
    g_m3 = 2.0 * np.einsum("mij,mjk->mik", g_cov_world, m3)
    g_rq = g_m3 * proj.s[:, None, :]
    g_s = np.einsum("mij,mij->mj", proj.r_q, g_m3)

    # blended normal: signed min-axis column
    ar = np.arange(m)
    g_rq[ar, :, proj.kmin] += proj.sign[:, None] * g_nworld

    # quaternion (through normalization)
    qjac = quat_rotation_jacobian(cloud.rotations[proj.ids]).astype(dt)
    g_qhat = np.einsum("mij,maij->ma", g_rq, qjac)
    qhat = quat_normalize(cloud.rotations[proj.ids]).astype(dt)
    qnorm = np.linalg.norm(cloud.rotations[proj.ids], axis=1).astype(dt)
    g_q = (g_qhat - qhat * np.einsum("ma,ma->m", qhat, g_qhat)[:, None]) / qnorm[:, None]

    g_log_scale = g_s * proj.s * proj.scale_unclamped

    sig = proj.opacity
    g_logit = g_opac * sig * (1.0 - sig)

    buf.d_position[proj.ids] = g_mu_world
    buf.d_rotation[proj.ids] = g_q
    buf.d_log_scale[proj.ids] = g_log_scale
    buf.d_opacity_logit[proj.ids] = g_logit
    buf.d_sh[proj.ids] = g_sh
    buf.screen_grad_norm[proj.ids] = np.linalg.norm(g_mu2d, axis=1)
    return buf


def render_depth_pointcloud(
    cloud: GaussianCloud,
    view: CameraView,
    cfg: RenderConfig | None = None,
    alpha_min: float = 0.5,
    out: RenderOutput | None = None,
) -> np.ndarray:
    """Backproject covered pixels through their alpha-normalized blended depth.

    Returns an (M, 3) array of world points; empty when nothing is covered.
    """
    cfg = cfg or RenderConfig()
    res = out if out is not None else render(cloud, view, cfg)
    rows, cols = np.nonzero(res.alpha >= alpha_min)
    if len(rows) == 0:
        return np.zeros((0, 3))
    depth = res.depth[rows, cols] / res.alpha[rows, cols]
    k = view.intrinsics
    p_cam = np.stack(
        [
            (cols - k.cx) / k.fx * depth,
            (rows - k.cy) / k.fy * depth,
            depth,
        ],
        axis=1,
    )
    return (p_cam - view.pose.translation) @ view.pose.rotation


# --- float-grid file format ----------------------------------------------------

_MAGIC = b"MVGR"


def write_float_grid(path: str | Path, grid: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) float grid: magic, u32 H/W/C, f32 LE row-major."""
    arr = np.asarray(grid, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("grid must be HxW or HxWxC")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_float_grid(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"not a float-grid file: {path}")
    h, w, c = struct.unpack("<III", raw[4:16])
    arr = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c)
    return arr[:, :, 0].astype(np.float64) if c == 1 else arr.astype(np.float64)
