"""Feature-extraction and segmentation backends.

Real backends (DINOv2 small via torch hub, SAM via segment-anything) need
model weights and are loaded lazily; when unavailable they raise
BackendUnavailable and the CLI exits nonzero without writing anything.  The
builtin backends are deterministic, dependency-light stand-ins that honor the
same interfaces and file contracts, so pipelines can be exercised offline.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .formats import CHANNELS, STRIDE, Prompts, grid_shape


class BackendUnavailable(RuntimeError):
    pass


# --- feature backends --------------------------------------------------------------


class BuiltinFeatureBackend:
    """Deterministic per-cell descriptors projected to 384 channels.

    Each stride x stride cell yields color means/stds, an 8-bin gradient
    orientation histogram, and a 5x5 luminance thumbnail; a fixed random
    projection lifts the descriptor to the DINOv2 channel count.
    """

    name = "builtin"

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(size=(39, CHANNELS)) / np.sqrt(39)

    def extract(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        hf, wf = grid_shape(h, w)
        gray = image @ np.array([0.299, 0.587, 0.114])
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.clip(((ang + np.pi) / (2 * np.pi) * 8).astype(int), 0, 7)

        grid = np.zeros((hf, wf, CHANNELS))
        desc = np.zeros(39)
        for i in range(hf):
            for j in range(wf):
                ys = slice(i * STRIDE, min((i + 1) * STRIDE, h))
                xs = slice(j * STRIDE, min((j + 1) * STRIDE, w))
                cell = image[ys, xs]
                desc[:3] = cell.mean(axis=(0, 1)) - 0.5
                desc[3:6] = cell.std(axis=(0, 1))
                hist = np.bincount(bins[ys, xs].reshape(-1), weights=mag[ys, xs].reshape(-1), minlength=8)
                total = hist.sum()
                desc[6:14] = hist / total if total > 1e-12 else 0.0
                patch = gray[ys, xs]
                ph, pw = patch.shape
                ri = np.clip((np.arange(5) * ph) // 5, 0, ph - 1)
                ci = np.clip((np.arange(5) * pw) // 5, 0, pw - 1)
                desc[14:39] = (patch[np.ix_(ri, ci)] - patch.mean()).reshape(-1)
                vec = desc @ self._proj
                norm = np.linalg.norm(vec)
                grid[i, j] = vec / norm if norm > 1e-12 else 0.0
        return grid


class Dinov2FeatureBackend:
    """DINOv2 ViT-S/14 patch tokens (C = 384, stride 14) via torch hub."""

    name = "dinov2"

    def __init__(self, model_id: str = "dinov2_vits14", device: str = "cpu"):
        try:
            import torch
        except ImportError as exc:
            raise BackendUnavailable(f"torch not installed: {exc}") from exc
        self.torch = torch
        try:
            self.model = torch.hub.load("facebookresearch/dinov2", model_id)
        except Exception as exc:
            raise BackendUnavailable(f"failed to load {model_id}: {exc}") from exc
        self.model.eval().to(device)
        self.device = device

    def extract(self, image: np.ndarray) -> np.ndarray:
        torch = self.torch
        h, w = image.shape[:2]
        hf, wf = grid_shape(h, w)
        mean = np.array([0.485, 0.456, 0.406])
        std = np.array([0.229, 0.224, 0.225])
        x = torch.from_numpy(((image - mean) / std).transpose(2, 0, 1)[None]).float()
        x = torch.nn.functional.interpolate(
            x, size=(hf * STRIDE, wf * STRIDE), mode="bilinear", align_corners=False
        ).to(self.device)
        with torch.no_grad():
            tokens = self.model.forward_features(x)["x_norm_patchtokens"]
        grid = tokens.reshape(hf, wf, -1).cpu().numpy().astype(np.float64)
        if grid.shape[2] != CHANNELS:
            raise BackendUnavailable(
                f"model emits {grid.shape[2]} channels; the pipeline expects {CHANNELS}"
            )
        return grid


# --- segmentation backends -----------------------------------------------------------


class BuiltinSegmentBackend:
    """Prompt-seeded region growing over color similarity.

    Grows a component around every positive prompt, discards components that
    contain a negative prompt, and fills enclosed holes.
    """

    name = "builtin"

    def __init__(self, color_tol: float = 0.06):
        self.color_tol = color_tol

    def segment(self, image: np.ndarray, prompts: Prompts) -> np.ndarray:
        h, w = image.shape[:2]
        out = np.zeros((h, w), dtype=bool)
        negatives = {(int(x), int(y)) for x, y in prompts.negatives}
        for x, y in {(int(px), int(py)) for px, py in prompts.positives}:
            seed = image[y, x]
            similar = np.max(np.abs(image - seed), axis=2) <= self.color_tol
            labels, _ = ndimage.label(similar)
            region = labels == labels[y, x]
            if any(region[ny, nx] for nx, ny in negatives):
                continue
            out |= region
        if out.any():
            out = ndimage.binary_fill_holes(out)
        return out.astype(np.uint8)


class SamSegmentBackend:
    """Segment-anything with point prompts; needs the package and a checkpoint."""

    name = "sam"

    def __init__(self, checkpoint: str, model_type: str = "vit_b", device: str = "cpu"):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as exc:
            raise BackendUnavailable(f"segment_anything not installed: {exc}") from exc
        try:
            sam = sam_model_registry[model_type](checkpoint=checkpoint)
        except Exception as exc:
            raise BackendUnavailable(f"failed to load SAM checkpoint: {exc}") from exc
        sam.to(device)
        self.predictor = SamPredictor(sam)

    def segment(self, image: np.ndarray, prompts: Prompts) -> np.ndarray:
        self.predictor.set_image((image * 255).astype(np.uint8))
        pts = np.concatenate([prompts.positives, prompts.negatives]).astype(np.float64)
        labels = np.concatenate(
            [np.ones(len(prompts.positives)), np.zeros(len(prompts.negatives))]
        )
        masks, scores, _ = self.predictor.predict(
            point_coords=pts, point_labels=labels, multimask_output=True
        )
        return masks[int(np.argmax(scores))].astype(np.uint8)


def make_feature_backend(name: str, **kw):
    if name == "builtin":
        return BuiltinFeatureBackend()
    if name == "dinov2":
        return Dinov2FeatureBackend(**kw)
    raise ValueError(f"unknown feature backend {name!r}")


def make_segment_backend(name: str, **kw):
    if name == "builtin":
        return BuiltinSegmentBackend()
    if name == "sam":
        return SamSegmentBackend(**kw)
    raise ValueError(f"unknown segmentation backend {name!r}")
