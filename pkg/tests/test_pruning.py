import numpy as np
import pytest

from surfsplat.gaussians import ply_bytes
from surfsplat.pruning import (
    ContributionTable,
    apply_prune,
    compute_contribution,
    default_prune_threshold,
)
from surfsplat.renderer import RenderConfig, render
from surfsplat.synthetic import generate_synthetic_scene
from conftest import make_view, random_cloud

RC = RenderConfig(background=(1, 1, 1))


def table(counts, weights=None, n_views=10):
    counts = np.asarray(counts)
    w = np.arange(len(counts), dtype=np.float64) + 1 if weights is None else np.asarray(weights)
    return ContributionTable(view_count=counts, total_weight=w, n_views=n_views)


class TestThreshold:
    def test_paper_default_for_many_views(self):
        assert default_prune_threshold(49) == 8
        assert default_prune_threshold(16) == 8

    def test_scaled_for_small_scenes(self):
        assert default_prune_threshold(10) == 5
        assert default_prune_threshold(9) == 5
        assert default_prune_threshold(4) == 2


class TestComputeContribution:
    def test_out_of_frustum_gaussian_zero(self, plane_dataset_64):
        ds = plane_dataset_64
        cloud = ds.gt_cloud.copy()
        cloud.positions[0] = [100.0, 100.0, 100.0]  # far outside every frustum
        t = compute_contribution(cloud, ds.train_views, RC)
        assert t.view_count[0] == 0
        assert t.total_weight[0] == 0.0

    def test_counts_threshold_crossings(self):
        # direct count: weights (0.6, 0.4, 0.7) with δ=0.5 -> C_MV = 2
        counts = (np.array([0.6, 0.4, 0.7]) > 0.5).sum()
        assert counts == 2

    def test_matches_tile_free_recomputation(self):
        # tile-free oracle: one tile covering the whole image must give the
        # same per-view weight sums as the tiled schedule
        cloud = random_cloud(n=20, seed=3)
        views = [make_view("a"), make_view("b")]
        tiled = compute_contribution(cloud, views, RenderConfig(tile_size=16, early_stop_T=0.0))
        whole = compute_contribution(cloud, views, RenderConfig(tile_size=64, early_stop_T=0.0))
        assert np.allclose(tiled.total_weight, whole.total_weight, atol=1e-9)
        assert np.array_equal(tiled.view_count, whole.view_count)

    def test_view_permutation_invariant(self, plane_dataset_64):
        ds = plane_dataset_64
        cloud = ds.gt_cloud
        a = compute_contribution(cloud, ds.train_views, RC)
        b = compute_contribution(cloud, ds.train_views[::-1], RC)
        assert np.array_equal(a.view_count, b.view_count)
        assert np.allclose(a.total_weight, b.total_weight)


class TestApplyPrune:
    def test_all_supported_unchanged(self):
        cloud = random_cloud(n=6, seed=0)
        t = table([9, 8, 10, 9, 8, 9])
        out, report = apply_prune(cloud, t, views_total=18, policy="remove")
        assert len(out) == 6
        assert report.removed == 0

    def test_single_floater_removed(self):
        cloud = random_cloud(n=5, seed=1)
        t = table([9, 1, 9, 9, 9])
        out, report = apply_prune(cloud, t, views_total=18, policy="remove")
        assert len(out) == 4
        assert report.removed == 1
        assert np.allclose(out.positions, cloud.positions[[0, 2, 3, 4]])

    def test_remove_preserves_order(self):
        cloud = random_cloud(n=8, seed=2)
        t = table([9, 1, 9, 1, 9, 9, 1, 9])
        out, _ = apply_prune(cloud, t, views_total=18, policy="remove")
        assert np.allclose(out.positions, cloud.positions[[0, 2, 4, 5, 7]])

    def test_reset_policy_sets_low_opacity(self):
        cloud = random_cloud(n=4, seed=3)
        cloud.opacity_logits[:] = 2.0
        t = table([9, 1, 9, 2])
        out, report = apply_prune(cloud, t, views_total=18, policy="reset_opacity", reset_value=0.01)
        assert len(out) == 4
        assert report.reset == 2
        assert np.isclose(out.opacities[1], 0.01)
        assert np.isclose(out.opacities[3], 0.01)
        assert np.isclose(out.opacities[0], cloud.opacities[0])

    def test_threshold_zero_is_identity(self):
        cloud = random_cloud(n=5, seed=4)
        t = table([0, 0, 0, 0, 0])
        out, report = apply_prune(cloud, t, views_total=18, delta_prune=0, policy="remove")
        assert len(out) == 5
        assert report.removed == 0

    def test_prune_all_guard_keeps_top_contributor(self):
        cloud = random_cloud(n=4, seed=5)
        t = table([1, 2, 1, 1], weights=[0.1, 5.0, 0.3, 0.2])
        out, report = apply_prune(cloud, t, views_total=18, policy="remove")
        assert len(out) == 1
        assert report.guard_triggered
        assert np.allclose(out.positions[0], cloud.positions[1])

    def test_storage_strictly_decreases_on_removal(self):
        cloud = random_cloud(n=10, seed=6)
        t = table([9] * 9 + [1])
        out, report = apply_prune(cloud, t, views_total=18, policy="remove")
        assert report.bytes_after < report.bytes_before
        assert report.bytes_before == len(ply_bytes(cloud))
        assert report.bytes_after == len(ply_bytes(out))

    def test_bad_policy_rejected(self):
        with pytest.raises(ValueError):
            apply_prune(random_cloud(n=2), table([1, 1]), 10, policy="nuke")

    def test_report_file(self, tmp_path):
        cloud = random_cloud(n=5, seed=7)
        _, report = apply_prune(cloud, table([9, 1, 9, 9, 9]), views_total=18)
        report.write(tmp_path / "report.txt")
        text = (tmp_path / "report.txt").read_text()
        assert "removed = 1" in text
        assert "bytes_before" in text


class TestFloaterScene:
    def test_floaters_get_low_counts_and_prune_removes_them(self, plane_dataset_64):
        from surfsplat.synthetic import add_floaters

        ds = plane_dataset_64
        n_base = len(ds.gt_cloud)
        cloud = add_floaters(ds, fraction=0.3, seed=1)
        n_float = len(cloud) - n_base
        t = compute_contribution(cloud, ds.train_views, RC)
        out, report = apply_prune(cloud, t, views_total=len(ds.train_views), policy="remove")
        removed_floaters = n_float - int(
            (t.view_count[n_base:] >= default_prune_threshold(len(ds.train_views))).sum()
        )
        assert report.removed >= 0.25 * len(cloud)  # cuts at least a quarter
        assert removed_floaters / n_float > 0.9  # nearly all floaters go
