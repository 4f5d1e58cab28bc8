"""Multi-view contribution statistics and the Gaussian removal / reset policy.

A Gaussian's contribution in one view is the sum over pixels of its blend
weight T·α (per_gaussian_weight from the renderer); its multi-view count C_MV
is the number of training views where that sum exceeds δ_opacity.  Gaussians
supported by too few views are floaters: removed, or reset to a low opacity so
gradients can re-decide them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cameras import CameraView
from .gaussians import GaussianCloud, ply_bytes
from .renderer import RenderConfig, render
from .utils import parallel_map

DELTA_OPACITY = 0.5
DELTA_PRUNE = 8
RESET_OPACITY = 0.01


@dataclass
class ContributionTable:
    view_count: np.ndarray  # (N,) int: views where the blend-weight sum exceeds δ_opacity
    total_weight: np.ndarray  # (N,) float: sum of per-view blend-weight sums
    n_views: int


@dataclass
class PruneReport:
    policy: str
    threshold: int
    removed: int
    reset: int
    kept: int
    bytes_before: int
    bytes_after: int
    guard_triggered: bool = False

    def lines(self) -> list[str]:
        return [
            f"policy = {self.policy}",
            f"threshold = {self.threshold}",
            f"removed = {self.removed}",
            f"reset = {self.reset}",
            f"kept = {self.kept}",
            f"bytes_before = {self.bytes_before}",
            f"bytes_after = {self.bytes_after}",
            f"guard_triggered = {int(self.guard_triggered)}",
        ]

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def default_prune_threshold(views_total: int) -> int:
    """δ_prune = 8 for large view sets, ceil(V/2) for small synthetic scenes."""
    return min(DELTA_PRUNE, math.ceil(views_total / 2))


def compute_contribution(
    cloud: GaussianCloud,
    views: list[CameraView],
    cfg: RenderConfig | None = None,
    delta_opacity: float = DELTA_OPACITY,
    threads: int = 1,
) -> ContributionTable:
    cfg = cfg or RenderConfig()
    weights = parallel_map(
        lambda v: render(cloud, v, cfg).per_gaussian_weight, views, threads
    )
    view_count = np.zeros(len(cloud), dtype=np.int64)
    total = np.zeros(len(cloud))
    for w in weights:
        view_count += w > delta_opacity
        total += w
    return ContributionTable(view_count=view_count, total_weight=total, n_views=len(views))


def apply_prune(
    cloud: GaussianCloud,
    table: ContributionTable,
    views_total: int,
    delta_prune: int | None = None,
    policy: str = "remove",
    reset_value: float = RESET_OPACITY,
) -> tuple[GaussianCloud, PruneReport]:
    """Remove (or opacity-reset) Gaussians with C_MV below the threshold.

    Pruning everything is rejected: the top contributor by total weight is
    kept and the guard is reported.
    """
    if policy not in ("remove", "reset_opacity"):
        raise ValueError(f"unknown prune policy {policy!r}")
    threshold = default_prune_threshold(views_total) if delta_prune is None else delta_prune
    doomed = table.view_count < threshold

    guard = False
    if doomed.all() and len(cloud) > 0:
        keeper = int(np.argmax(table.total_weight))
        doomed[keeper] = False
        guard = True

    bytes_before = len(ply_bytes(cloud))
    if policy == "remove":
        out = cloud.subset(~doomed)
        removed, reset = int(doomed.sum()), 0
    else:
        out = cloud.copy()
        logit = math.log(reset_value / (1.0 - reset_value))
        hit = doomed & (out.opacities > reset_value)
        out.opacity_logits[hit] = logit
        removed, reset = 0, int(hit.sum())
    bytes_after = len(ply_bytes(out))

    report = PruneReport(
        policy=policy,
        threshold=threshold,
        removed=removed,
        reset=reset,
        kept=len(out) if policy == "remove" else len(out) - reset,
        bytes_before=bytes_before,
        bytes_after=bytes_after,
        guard_triggered=guard,
    )
    return out, report
