"""Optimization objectives and their analytic gradients.

All gradients here are hand-derived and checked against central finite
differences in the test suite.  Masked pixels are excluded from every
statistic (including SSIM window means), so content behind a distractor mask
provably never reaches the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .cameras import CameraView, PixelPlaneHomographies, pixel_plane_homographies
from .renderer import RenderOutput

LAMBDA_FLATTEN = 100.0
LAMBDA_MV = 0.2
NCC_EPS = 1e-8
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class LossBreakdown:
    l_rgb: float
    l_s: float
    l_mv: float
    w_repro: float
    total: float
    pixel_count: int
    all_masked: bool = False


def total_loss(
    l_rgb: float,
    l_s: float,
    l_mv: float,
    w_repro: float,
    pixel_count: int = 0,
    lambda_flatten: float = LAMBDA_FLATTEN,
    lambda_mv: float = LAMBDA_MV,
    all_masked: bool = False,
) -> LossBreakdown:
    """Combine loss terms: total = l_rgb + λ₁ l_s + λ₂ w_repro l_mv."""
    total = l_rgb + lambda_flatten * l_s + lambda_mv * w_repro * l_mv
    return LossBreakdown(l_rgb, l_s, l_mv, w_repro, total, pixel_count, all_masked)


def luminance(img: np.ndarray) -> np.ndarray:
    return img @ LUMA


# --- masked photometric loss ---------------------------------------------------

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _ssim_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2.0 * sigma**2))
    return w / w.sum()


def _wfilter(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


@dataclass
class RgbLoss:
    value: float
    d_color: np.ndarray  # (H, W, 3) gradient w.r.t. the rendered image
    pixel_count: int
    all_masked: bool


def rgb_loss(
    rendered: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray | None = None,
    lambda_ssim: float = 0.2,
) -> RgbLoss:
    """(1−λ)·L1 + λ·(1−SSIM₁₁ₓ₁₁) over unmasked pixels, with gradient.

    ``mask`` is a binary grid; 1 marks distractor pixels excluded from
    supervision.  SSIM window statistics are reweighted to ignore masked
    pixels entirely.  Set ``lambda_ssim=0`` for pure L1.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("rendered/target shapes differ")
    h, w, _ = rendered.shape
    valid = np.ones((h, w)) if mask is None else 1.0 - np.asarray(mask, dtype=np.float64)
    n_sup = int(valid.sum())
    if n_sup == 0:
        return RgbLoss(0.0, np.zeros_like(rendered), 0, True)

    diff = rendered - target
    l1 = float((np.abs(diff) * valid[:, :, None]).sum() / (n_sup * 3))
    d_l1 = np.sign(diff) * valid[:, :, None] / (n_sup * 3)

    if lambda_ssim == 0.0:
        return RgbLoss(l1, d_l1, n_sup, False)

    win = _ssim_window()
    z = _wfilter(valid, win)
    zsafe = np.where(valid > 0, np.maximum(z, 1e-12), 1.0)
    scale = 1.0 / (n_sup * 3)

    ssim_sum = 0.0
    d_ssim = np.zeros_like(rendered)
    for c in range(3):
        x = rendered[:, :, c]
        y = target[:, :, c]
        mu_x = _wfilter(x * valid, win) / zsafe
        mu_y = _wfilter(y * valid, win) / zsafe
        var_x = _wfilter(x * x * valid, win) / zsafe - mu_x**2
        var_y = _wfilter(y * y * valid, win) / zsafe - mu_y**2
        cov = _wfilter(x * y * valid, win) / zsafe - mu_x * mu_y

        n1 = 2 * mu_x * mu_y + _SSIM_C1
        n2 = 2 * cov + _SSIM_C2
        d1 = mu_x**2 + mu_y**2 + _SSIM_C1
        d2 = var_x + var_y + _SSIM_C2
        s = (n1 * n2) / (d1 * d2)
        ssim_sum += float((s * valid).sum())

        # partials of S at each window center, spread back through the
        # weighted means: dS/dx_k = ω_k(p)[A + 2B(x_k−μx) + Γ(y_k−μy)]
        a_t = (2 * mu_y * n2 / (d1 * d2) - s * 2 * mu_x / d1) * valid / zsafe
        b_t = (-s / d2) * valid / zsafe
        g_t = (2 * n1 / (d1 * d2)) * valid / zsafe
        term = (
            _wfilter(a_t, win)
            + 2 * x * _wfilter(b_t, win)
            - 2 * _wfilter(b_t * mu_x, win)
            + y * _wfilter(g_t, win)
            - _wfilter(g_t * mu_y, win)
        )
        d_ssim[:, :, c] = -scale * valid * term

    mssim = ssim_sum * scale
    value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - mssim)
    grad = (1.0 - lambda_ssim) * d_l1 + lambda_ssim * d_ssim
    return RgbLoss(value, grad, n_sup, False)


# --- surfel flattening ----------------------------------------------------------


def flatten_loss(cloud) -> tuple[float, np.ndarray]:
    """Mean over Gaussians of the minimum (clamped) axis scale, with gradient."""
    n = len(cloud)
    if n == 0:
        return 0.0, np.zeros((0, 3))
    raw = np.exp(cloud.log_scales)
    s = cloud.scales
    jmin = np.argmin(s, axis=1)
    ar = np.arange(n)
    value = float(s[ar, jmin].mean())
    grad = np.zeros((n, 3))
    unclamped = (raw[ar, jmin] > 1e-6) & (raw[ar, jmin] < 1e3)
    grad[ar, jmin] = s[ar, jmin] * unclamped / n
    return value, grad


# --- normalized cross correlation ------------------------------------------------


def ncc(patch_a: np.ndarray, patch_b: np.ndarray) -> float:
    """Σ(a−ā)(b−b̄) / sqrt(Σ(a−ā)²·Σ(b−b̄)² + ε); 0 for constant patches."""
    a = np.asarray(patch_a, dtype=np.float64).reshape(-1)
    b = np.asarray(patch_b, dtype=np.float64).reshape(-1)
    am = a - a.mean()
    bm = b - b.mean()
    return float((am @ bm) / np.sqrt((am @ am) * (bm @ bm) + NCC_EPS))


def _ncc_batch_grad_b(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched NCC over (V, P) patches plus ∂ncc/∂b."""
    am = a - a.mean(axis=1, keepdims=True)
    bm = b - b.mean(axis=1, keepdims=True)
    cov = (am * bm).sum(axis=1)
    va = (am * am).sum(axis=1)
    vb = (bm * bm).sum(axis=1)
    den = np.sqrt(va * vb + NCC_EPS)
    vals = cov / den
    d_b = am / den[:, None] - (cov * va / den**3)[:, None] * bm
    return vals, d_b


# --- bilinear sampling -----------------------------------------------------------


def bilinear_sample(grid: np.ndarray, pts: np.ndarray, with_grad: bool = False):
    """Sample a 2D grid at (x, y) points; optionally return ∂value/∂(x, y)."""
    h, w = grid.shape
    x = np.clip(pts[..., 0], 0.0, w - 1.0)
    y = np.clip(pts[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    g00 = grid[y0, x0]
    g01 = grid[y0, x0 + 1]
    g10 = grid[y0 + 1, x0]
    g11 = grid[y0 + 1, x0 + 1]
    top = g00 * (1 - fx) + g01 * fx
    bot = g10 * (1 - fx) + g11 * fx
    vals = top * (1 - fy) + bot * fy
    if not with_grad:
        return vals
    dvx = (g01 - g00) * (1 - fy) + (g11 - g10) * fy
    dvy = bot - top
    return vals, np.stack([dvx, dvy], axis=-1)


# --- homography gradient chain ---------------------------------------------------


def _homography_backward(ctx: PixelPlaneHomographies, d_h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain ∂loss/∂H back to (∂loss/∂depth, ∂loss/∂world-normal)."""
    d_b = np.einsum("ba,vbc,cd->vad", ctx.k_n, d_h, ctx.k_r_inv.T)
    inv_d = np.einsum("vab,a,vb->v", d_b, ctx.t_rn, ctx.n_hat)  # ∂loss/∂(1/d_r)
    d_dr = -inv_d / ctx.d_r**2
    d_depth = d_dr * ctx.dot
    d_nhat = np.einsum("a,vaj->vj", ctx.t_rn, d_b) / ctx.d_r[:, None]
    d_nhat += d_dr[:, None] * ctx.depth[:, None] * ctx.r_hat
    d_ncam = (
        d_nhat - ctx.n_hat * np.einsum("vi,vi->v", ctx.n_hat, d_nhat)[:, None]
    ) / np.maximum(ctx.nu, 1e-8)[:, None]
    d_ncam[ctx.fallback] = 0.0
    d_depth = np.where(ctx.fallback, 0.0, d_depth)
    d_nworld = d_ncam @ ctx.rot_ref
    return d_depth, d_nworld


# --- multi-view photometric consistency ---------------------------------------------


@dataclass
class MvLoss:
    value: float
    d_depth: np.ndarray  # (H, W) gradient w.r.t. the rendered depth map
    d_normal: np.ndarray  # (H, W, 3) gradient w.r.t. the rendered normal map
    valid_count: int
    ref_pixels: np.ndarray  # (V, 2) samples that survived all validity checks
    nbr_pixels: np.ndarray  # (V, 2) their warped centers in the neighbor view


def sample_mv_pixels(
    ref_render: RenderOutput,
    mask: np.ndarray | None,
    rng: np.random.Generator,
    max_samples: int = 4096,
    patch_radius: int = 5,
    alpha_min: float = 0.5,
) -> np.ndarray:
    """Pick up to max_samples unmasked, alpha-covered pixels with patch margin."""
    h, w = ref_render.alpha.shape
    ok = ref_render.alpha >= alpha_min
    if mask is not None:
        ok &= np.asarray(mask) == 0
    ok[:patch_radius, :] = False
    ok[h - patch_radius:, :] = False
    ok[:, :patch_radius] = False
    ok[:, w - patch_radius:] = False
    rows, cols = np.nonzero(ok)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=int)
    if len(rows) > max_samples:
        pick = rng.choice(len(rows), size=max_samples, replace=False)
        rows, cols = rows[pick], cols[pick]
    return np.stack([cols, rows], axis=1)


def mv_consistency_loss(
    ref_view: CameraView,
    nbr_view: CameraView,
    ref_render: RenderOutput,
    sample_pixels: np.ndarray,
    mask: np.ndarray | None = None,
    nbr_mask: np.ndarray | None = None,
    patch_radius: int = 5,
    alpha_min: float = 0.5,
    freeze_normal_path: bool = False,
) -> MvLoss:
    """Mean (1 − NCC) between reference patches and their plane-warped
    counterparts in the neighbor image; gradients flow to the rendered depth
    and normal maps through the per-pixel homography and bilinear sampling.

    Samples are dropped when the warped patch exits the neighbor image,
    touches the neighbor's distractor mask, the reference patch is constant,
    or the local plane is degenerate.
    """
    h, w = ref_render.alpha.shape
    d_depth = np.zeros((h, w))
    d_normal = np.zeros((h, w, 3))
    empty = MvLoss(0.0, d_depth, d_normal, 0, np.zeros((0, 2), int), np.zeros((0, 2)))
    pixels = np.asarray(sample_pixels, dtype=int).reshape(-1, 2)
    if len(pixels) == 0:
        return empty

    cols, rows = pixels[:, 0], pixels[:, 1]
    alpha = ref_render.alpha[rows, cols]
    keep = alpha >= alpha_min
    if mask is not None:
        keep &= np.asarray(mask)[rows, cols] == 0
    pixels = pixels[keep]
    if len(pixels) == 0:
        return empty
    cols, rows = pixels[:, 0], pixels[:, 1]
    alpha = ref_render.alpha[rows, cols]

    depth = ref_render.depth[rows, cols] / alpha  # alpha treated as constant
    n_world = ref_render.normal[rows, cols]
    good = depth > 1e-6
    pixels, cols, rows = pixels[good], cols[good], rows[good]
    depth, n_world, alpha = depth[good], n_world[good], alpha[good]
    if len(pixels) == 0:
        return empty

    ctx = pixel_plane_homographies(ref_view, nbr_view, pixels.astype(np.float64), depth, n_world)
    ok = np.abs(ctx.d_r) > 1e-9

    # warp the 11x11 patch grids
    rad = patch_radius
    oxy = np.stack(np.meshgrid(np.arange(-rad, rad + 1), np.arange(-rad, rad + 1), indexing="xy"), axis=-1)
    offs = oxy.reshape(-1, 2)  # (P, 2) as (dx, dy)
    p_patch = pixels[:, None, :] + offs[None, :, :]  # (V, P, 2)
    ptil = np.concatenate([p_patch, np.ones(p_patch.shape[:2] + (1,))], axis=2)
    r_h = np.einsum("vab,vkb->vka", ctx.h, ptil)
    wz = r_h[:, :, 2]
    ok &= np.abs(wz).min(axis=1) > 1e-12
    wz_safe = np.where(np.abs(wz) < 1e-12, 1.0, wz)
    q = r_h[:, :, :2] / wz_safe[:, :, None]

    hn, wn = nbr_view.intrinsics.height, nbr_view.intrinsics.width
    inb = (q[:, :, 0] >= 0) & (q[:, :, 0] <= wn - 1) & (q[:, :, 1] >= 0) & (q[:, :, 1] <= hn - 1)
    ok &= inb.all(axis=1)

    if nbr_mask is not None:
        nmask = np.asarray(nbr_mask)
        qx0 = np.clip(np.floor(np.clip(q[:, :, 0], 0, wn - 1)).astype(int), 0, wn - 2)
        qy0 = np.clip(np.floor(np.clip(q[:, :, 1], 0, hn - 1)).astype(int), 0, hn - 2)
        touched = (
            nmask[qy0, qx0] | nmask[qy0, qx0 + 1] | nmask[qy0 + 1, qx0] | nmask[qy0 + 1, qx0 + 1]
        )
        ok &= ~touched.any(axis=1)

    gray_ref = luminance(ref_view.image)
    a_patch = gray_ref[p_patch[:, :, 1], p_patch[:, :, 0]]
    ok &= a_patch.var(axis=1) > 1e-10
    if mask is not None:
        # the reference patch must not read masked content either
        ref_touched = np.asarray(mask)[p_patch[:, :, 1], p_patch[:, :, 0]] != 0
        ok &= ~ref_touched.any(axis=1)

    if not ok.any():
        return empty
    sel = np.nonzero(ok)[0]
    v = len(sel)
    q, a_patch = q[sel], a_patch[sel]
    ptil, wz_sel = ptil[sel], wz_safe[sel]
    r_sel = r_h[sel]

    gray_nbr = luminance(nbr_view.image)
    b_patch, db_dq = bilinear_sample(gray_nbr, q, with_grad=True)

    vals, d_b = _ncc_batch_grad_b(a_patch, b_patch)
    value = float((1.0 - vals).sum() / v)

    d_bpatch = -d_b / v
    d_q = d_bpatch[:, :, None] * db_dq  # (V, P, 2)
    d_r = np.empty_like(r_sel)
    d_r[:, :, 0] = d_q[:, :, 0] / wz_sel
    d_r[:, :, 1] = d_q[:, :, 1] / wz_sel
    d_r[:, :, 2] = -(d_q[:, :, 0] * r_sel[:, :, 0] + d_q[:, :, 1] * r_sel[:, :, 1]) / wz_sel**2
    d_h = np.einsum("vka,vkb->vab", d_r, ptil)

    sub = PixelPlaneHomographies(
        ctx.h[sel], ctx.n_hat[sel], ctx.nu[sel], ctx.fallback[sel], ctx.r_hat[sel],
        ctx.depth[sel], ctx.dot[sel], ctx.d_r[sel], ctx.t_rn, ctx.k_n, ctx.k_r_inv, ctx.rot_ref,
    )
    dd, dn = _homography_backward(sub, d_h)
    if freeze_normal_path:
        dn = np.zeros_like(dn)

    rs, cs = rows[sel], cols[sel]
    np.add.at(d_depth, (rs, cs), dd / alpha[sel])
    np.add.at(d_normal, (rs, cs), dn)
    center = offs.shape[0] // 2
    return MvLoss(value, d_depth, d_normal, v, pixels[sel], q[:, center, :])


def reprojection_weight(
    ref_pixels: np.ndarray, nbr_pixels: np.ndarray, h_rn: np.ndarray
) -> tuple[float, float]:
    """Mean pixel reprojection error through a backward homography and its
    gating weight w = 1/(1+E).  No gradient: the weight only scales the loss.
    """
    ref_pixels = np.asarray(ref_pixels, dtype=np.float64).reshape(-1, 2)
    nbr_pixels = np.asarray(nbr_pixels, dtype=np.float64).reshape(-1, 2)
    if len(ref_pixels) == 0:
        return 0.0, 1.0
    ptil = np.concatenate([nbr_pixels, np.ones((len(nbr_pixels), 1))], axis=1)
    h_rn = np.asarray(h_rn, dtype=np.float64)
    if h_rn.ndim == 2:
        back = ptil @ h_rn.T
    else:
        back = np.einsum("vab,vb->va", h_rn, ptil)
    wz = np.where(np.abs(back[:, 2]) < 1e-12, 1.0, back[:, 2])
    p_back = back[:, :2] / wz[:, None]
    err = float(np.linalg.norm(ref_pixels - p_back, axis=1).mean())
    return err, 1.0 / (1.0 + err)
