import hashlib
from pathlib import Path

import numpy as np
import pytest

from surfsplat.cameras import select_neighbors
from surfsplat.dataset import load_dataset, save_dataset
from surfsplat.masking import read_feature_map, write_feature_map
from surfsplat.renderer import RenderConfig, render
from surfsplat.synthetic import (
    DistractorSpec,
    OracleFeatureSource,
    PhotometricFeatureSource,
    DEFAULT_SIZE_RANGE,
    distractor_pixel_fraction,
    generate_synthetic_scene,
    inject_distractors,
    synth_features,
)

RC = RenderConfig(background=(1, 1, 1))


def dir_checksum(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGenerator:
    def test_plane_images_show_the_plane(self):
        ds = generate_synthetic_scene("plane", n_views=8, image_size=48, seed=1)
        # re-rendering the stored cloud reproduces each stored image
        for v in ds.views[:3]:
            out = render(ds.gt_cloud, v, RC)
            assert np.allclose(np.clip(out.color, 0, 1), v.image, atol=1e-12)
        # analytic surface points lie on the plane exactly
        assert np.all(ds.surface_points[:, 2] == 0.0)

    def test_ring_has_neighbors(self):
        ds = generate_synthetic_scene("plane", n_views=12, image_size=48, seed=0)
        graph = select_neighbors(ds.train_views)
        for v in ds.train_views:
            assert len(graph.neighbors(v.id)) >= 2

    def test_normalized_camera_distances(self):
        ds = generate_synthetic_scene("plane", n_views=10, image_size=48, seed=2)
        center = ds.scene_center()
        dists = [np.linalg.norm(v.pose.center - center) for v in ds.views]
        assert np.mean(dists) == pytest.approx(1.0, abs=0.1)

    def test_same_seed_identical_dataset_bytes(self, tmp_path):
        a = generate_synthetic_scene("plane", n_views=6, image_size=32, seed=5)
        b = generate_synthetic_scene("plane", n_views=6, image_size=32, seed=5)
        save_dataset(a, tmp_path / "a")
        save_dataset(b, tmp_path / "b")
        assert dir_checksum(tmp_path / "a") == dir_checksum(tmp_path / "b")

    def test_blobs_recipe(self):
        ds = generate_synthetic_scene("blobs", n_views=6, image_size=32, seed=3)
        assert len(ds.views) == 6
        assert ds.surface_points is None

    def test_rejects_single_view(self):
        with pytest.raises(ValueError):
            generate_synthetic_scene("plane", n_views=1)

    def test_dataset_roundtrip(self, tmp_path):
        ds = generate_synthetic_scene("plane", n_views=6, image_size=32, seed=7)
        ds = inject_distractors(ds, DistractorSpec(rate=0.5, seed=1))
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert [v.id for v in back.views] == [v.id for v in ds.views]
        for v, u in zip(ds.views, back.views):
            assert np.allclose(v.image, u.image, atol=1.0 / 255.0)
            assert np.allclose(v.pose.rotation, u.pose.rotation)
        for vid in ds.gt_masks:
            assert np.array_equal(back.gt_masks[vid], ds.gt_masks[vid])
        assert np.allclose(back.surface_points, ds.surface_points)
        assert back.gt_cloud is not None


class TestInjection:
    def test_rate_one_perturbs_every_training_view(self):
        ds = generate_synthetic_scene("plane", n_views=10, image_size=32, seed=0)
        out = inject_distractors(ds, DistractorSpec(rate=1.0, seed=0))
        for v in out.train_views:
            assert out.gt_masks[v.id].any()

    def test_ceil_of_rate_times_views(self):
        ds = generate_synthetic_scene("plane", n_views=10, image_size=32, seed=0, test_every=0)
        out = inject_distractors(ds, DistractorSpec(rate=0.3, seed=0))
        perturbed = sum(1 for v in out.train_views if out.gt_masks[v.id].any())
        assert perturbed == 3

    def test_tiny_rate_perturbs_one_view(self):
        ds = generate_synthetic_scene("plane", n_views=10, image_size=32, seed=0, test_every=0)
        out = inject_distractors(ds, DistractorSpec(rate=0.01, seed=0))
        perturbed = sum(1 for v in out.train_views if out.gt_masks[v.id].any())
        assert perturbed == 1

    def test_heldout_views_untouched(self):
        ds = generate_synthetic_scene("plane", n_views=12, image_size=32, seed=0)
        out = inject_distractors(ds, DistractorSpec(rate=1.0, seed=0))
        for v_old, v_new in zip(ds.test_views, out.test_views):
            assert np.array_equal(v_old.image, v_new.image)
            assert not out.gt_masks[v_new.id].any()

    def test_mask_matches_composited_region(self):
        ds = generate_synthetic_scene("plane", n_views=8, image_size=48, seed=0)
        out = inject_distractors(ds, DistractorSpec(rate=1.0, seed=3))
        for v in out.train_views:
            changed = np.any(out.view_by_id(v.id).image != ds.view_by_id(v.id).image, axis=2)
            mask = out.gt_masks[v.id] != 0
            assert np.all(changed <= mask)  # only masked pixels changed

    def test_deterministic(self):
        ds = generate_synthetic_scene("plane", n_views=8, image_size=32, seed=0)
        a = inject_distractors(ds, DistractorSpec(rate=0.5, seed=9))
        b = inject_distractors(ds, DistractorSpec(rate=0.5, seed=9))
        for v in a.views:
            assert np.array_equal(v.image, b.view_by_id(v.id).image)

    def test_shapes_subset(self):
        ds = generate_synthetic_scene("plane", n_views=6, image_size=32, seed=0)
        out = inject_distractors(ds, DistractorSpec(rate=1.0, seed=0, shapes=("circle",)))
        assert any(out.gt_masks[v.id].any() for v in out.train_views)

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError):
            DistractorSpec(rate=0.0)


class TestFeatureDoubles:
    def test_oracle_consistent_scene_high_similarity(self, plane_dataset_64):
        ds = plane_dataset_64
        src = OracleFeatureSource(ds, seed=0)
        fm = src.for_image(ds.views[0].id)
        rendered = render(ds.gt_cloud, ds.views[0], RC)
        fm2 = src.for_render(ds.views[0].id, rendered)
        # same view, same geometry: cell features agree where defined
        a = fm.grid.reshape(-1, 384)
        b = fm2.grid.reshape(-1, 384)
        norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        ok = norms > 1e-12
        cos = np.einsum("ic,ic->i", a, b)[ok] / norms[ok]
        assert cos.min() > 0.99

    def test_oracle_distractor_cells_orthogonal_to_scene(self, plane_dataset_64):
        ds = inject_distractors(plane_dataset_64, DistractorSpec(rate=1.0, seed=0))
        src = OracleFeatureSource(ds, seed=0)
        vid = ds.train_views[0].id
        fm = src.for_image(vid)
        mask = ds.gt_masks[vid]
        cells = fm.grid.reshape(-1, 384)
        half = 192
        scene_cells = cells[np.linalg.norm(cells[:, :half], axis=1) > 0.5]
        distractor_cells = cells[np.linalg.norm(cells[:, half:], axis=1) > 0.5]
        assert len(distractor_cells) > 0 and len(scene_cells) > 0
        cross = np.abs(scene_cells @ distractor_cells.T)
        assert cross.max() < 1e-12

    def test_synth_features_mvfm_roundtrip(self, plane_dataset_64, tmp_path):
        maps = synth_features(plane_dataset_64, mode="oracle_orthogonal", seed=0)
        vid = plane_dataset_64.views[0].id
        write_feature_map(tmp_path / "a.mvfm", maps[vid])
        back = read_feature_map(tmp_path / "a.mvfm")
        write_feature_map(tmp_path / "b.mvfm", back)
        assert (tmp_path / "a.mvfm").read_bytes() == (tmp_path / "b.mvfm").read_bytes()

    def test_photometric_mode_runs(self, plane_dataset_64):
        src = PhotometricFeatureSource(plane_dataset_64)
        fm = src.for_image(plane_dataset_64.views[0].id)
        assert fm.grid.shape == (5, 5, 384)

    def test_unknown_mode_rejected(self, plane_dataset_64):
        with pytest.raises(ValueError):
            synth_features(plane_dataset_64, mode="resnet")


class TestOccupancyCalibration:
    def test_rate_03_and_10_within_bands(self):
        # Supp-calibrated: 9.45% at rate 0.3 and 28.34% at rate 1.0, ±3 pp,
        # averaged over 5 seeds (also the acceptance criterion)
        ds = generate_synthetic_scene("plane", n_views=12, image_size=96, seed=0)
        for rate, target in ((0.3, 0.0945), (1.0, 0.2834)):
            fr = [
                distractor_pixel_fraction(inject_distractors(ds, DistractorSpec(rate=rate, seed=s)))
                for s in range(5)
            ]
            assert abs(float(np.mean(fr)) - target) < 0.03, (rate, np.mean(fr))
