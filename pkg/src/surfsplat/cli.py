"""Command-line entry point.

Exit codes: 0 success, 1 usage error (message on stderr, nothing written),
2 runtime failure (a `.partial` marker is left in the output directory).
Every stochastic choice is pinned by --seed; no command mutates its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import SceneDataset, load_dataset, normalize_scene, save_dataset
from .evaluation import chamfer, evaluate_reconstruction, f1_score
from .gaussians import GaussianCloud, load_ply, save_ply
from .masking import (
    DistractorMask,
    FileMaskRefiner,
    FloodFillRefiner,
    PassThroughRefiner,
    load_mask,
    read_feature_map,
    save_mask,
    write_feature_map,
)
from .pruning import apply_prune, compute_contribution
from .renderer import RenderOutput, render, write_float_grid
from .synthetic import (
    DictFeatureSource,
    DistractorSpec,
    feature_source,
    generate_synthetic_scene,
    inject_distractors,
    synth_features,
)
from .training import (
    TrainConfig,
    build_state,
    generate_masks,
    train_coarse,
    train_full,
    write_training_log,
)
from .utils import save_image

FORMAT_VERSIONS = "MVGR1 MVFM1 PLY-3DGS1 CAMTXT1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None)
    p.add_argument("--config", default=None, help="key = value config file; flags override")


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    for f in fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            cfg.set_key(f.name, v)
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(stage, it, total, breakdown, n_gauss):
    print(
        f"[{stage}] {it}/{total} total={breakdown.total:.5f} "
        f"rgb={breakdown.l_rgb:.5f} mv={breakdown.l_mv:.5f} gaussians={n_gauss}",
        file=sys.stderr,
    )


def _save_render(out: Path, vid: str, res: RenderOutput) -> None:
    save_image(np.clip(res.color, 0, 1), out / f"{vid}_color.png")
    geom = np.concatenate(
        [res.depth[:, :, None], res.normal, res.alpha[:, :, None]], axis=2
    )
    write_float_grid(out / f"{vid}_geom.mvgr", geom)


def _load_renders(render_dir: Path, views) -> dict[str, RenderOutput]:
    from .renderer import read_float_grid

    renders = {}
    for v in views:
        geom = read_float_grid(render_dir / f"{v.id}_geom.mvgr")
        from .utils import load_image

        color = load_image(render_dir / f"{v.id}_color.png")
        renders[v.id] = RenderOutput(
            color=color,
            depth=geom[:, :, 0].astype(np.float64),
            normal=geom[:, :, 1:4].astype(np.float64),
            alpha=geom[:, :, 4].astype(np.float64),
            per_gaussian_weight=np.zeros(0),
        )
    return renders


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _make_refiner(args, ds: SceneDataset):
    kind = getattr(args, "refiner", "passthrough")
    if kind == "passthrough":
        return PassThroughRefiner()
    if kind == "floodfill":
        return FloodFillRefiner()
    if kind == "file":
        if not getattr(args, "refiner_dir", None):
            raise UsageError("--refiner file needs --refiner-dir")
        return FileMaskRefiner(args.refiner_dir)
    raise UsageError(f"unknown refiner {kind!r}")


# --- commands --------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    out = _out_dir(args)
    ds = generate_synthetic_scene(
        recipe=args.recipe,
        n_views=args.views,
        image_size=args.image_size,
        seed=args.seed,
        test_every=args.test_every,
    )
    save_dataset(ds, out)
    print(f"wrote {len(ds.views)} views to {out}", file=sys.stderr)
    return 0


def cmd_inject(args) -> int:
    _require(Path(args.dataset), "dataset")
    ds = load_dataset(args.dataset, test_every=args.test_every)
    spec = DistractorSpec(rate=args.rate, seed=args.seed)
    if args.size_range:
        lo, hi = (float(x) for x in args.size_range.split(","))
        spec.size_range = (lo, hi)
    if args.shapes:
        spec.shapes = tuple(args.shapes.split(","))
    out = _out_dir(args)
    save_dataset(inject_distractors(ds, spec), out)
    return 0


def cmd_features(args) -> int:
    _require(Path(args.dataset), "dataset")
    ds = load_dataset(args.dataset, test_every=args.test_every)
    out = _out_dir(args)
    maps = synth_features(ds, mode=args.mode, seed=args.seed)
    for vid, fm in maps.items():
        write_feature_map(out / f"{vid}.mvfm", fm)
    return 0


def cmd_train_coarse(args) -> int:
    _require(Path(args.dataset), "dataset")
    cfg = _build_config(args)
    ds = load_dataset(args.dataset, test_every=cfg.test_every)
    if args.normalize:
        ds, _ = normalize_scene(ds)
    out = _out_dir(args)
    state = train_coarse(ds, cfg, progress=_progress)
    save_ply(state.cloud, out / "coarse_cloud.ply")
    rdir = out / "renders"
    rdir.mkdir(exist_ok=True)
    for vid, res in state.renders.items():
        _save_render(rdir, vid, res)
    write_training_log(state, out / "train_log.csv")
    (out / "config.txt").write_text(cfg.to_text())
    return 0


def cmd_masks(args) -> int:
    _require(Path(args.dataset), "dataset")
    coarse = _require(Path(args.coarse), "coarse output directory")
    cfg = _build_config(args)
    ds = load_dataset(args.dataset, test_every=cfg.test_every)
    state = build_state(ds, cfg)
    state.cloud = load_ply(coarse / "coarse_cloud.ply")
    state.renders = _load_renders(coarse / "renders", ds.views)

    if args.feature_mode:
        source = feature_source(ds, args.feature_mode, seed=cfg.seed)
    else:
        if not args.features or not args.render_features:
            raise UsageError("need --feature-mode or both --features and --render-features")
        image_maps = {v.id: read_feature_map(Path(args.features) / f"{v.id}.mvfm") for v in ds.views}
        render_maps = {
            v.id: read_feature_map(Path(args.render_features) / f"{v.id}.mvfm") for v in ds.views
        }
        source = DictFeatureSource(image_maps, render_maps)

    out = _out_dir(args)
    refiner = _make_refiner(args, ds)
    masks = generate_masks(state, ds, source, refiner, cfg, out_dir=out / "stages")
    for vid, m in masks.items():
        save_mask(m.grid, out / f"{vid}.png")
    return 0


def cmd_train(args) -> int:
    _require(Path(args.dataset), "dataset")
    cfg = _build_config(args)
    ds = load_dataset(args.dataset, test_every=cfg.test_every)
    if args.normalize:
        ds, _ = normalize_scene(ds)
    masks = None
    if args.masks:
        mask_dir = _require(Path(args.masks), "mask directory")
        masks = {}
        for v in ds.train_views:
            p = mask_dir / f"{v.id}.png"
            grid = load_mask(p) if p.exists() else np.zeros(v.image.shape[:2], dtype=np.uint8)
            masks[v.id] = DistractorMask(grid, "refined")
    out = _out_dir(args)
    state = build_state(ds, cfg)
    cloud = train_full(state, ds, masks, cfg, progress=_progress)
    save_ply(cloud, out / "final_cloud.ply")
    write_training_log(state, out / "train_log.csv")
    (out / "config.txt").write_text(cfg.to_text())
    return 0


def cmd_prune(args) -> int:
    cloud_path = _require(Path(args.cloud), "cloud file")
    _require(Path(args.dataset), "dataset")
    cfg = _build_config(args)
    ds = load_dataset(args.dataset, test_every=cfg.test_every)
    cloud = load_ply(cloud_path)
    out = _out_dir(args)
    table = compute_contribution(
        cloud, ds.train_views, cfg.render_config(), delta_opacity=cfg.delta_opacity,
        threads=cfg.threads,
    )
    threshold = None if cfg.delta_prune < 0 else cfg.delta_prune
    pruned, report = apply_prune(
        cloud, table, len(ds.train_views), threshold,
        policy=args.policy, reset_value=cfg.prune_reset_opacity,
    )
    save_ply(pruned, out / "pruned_cloud.ply")
    report.write(out / "prune_report.txt")
    for line in report.lines():
        print(line, file=sys.stderr)
    return 0


def cmd_render(args) -> int:
    cloud_path = _require(Path(args.cloud), "cloud file")
    _require(Path(args.dataset), "dataset")
    cfg = _build_config(args)
    ds = load_dataset(args.dataset, test_every=cfg.test_every)
    cloud = load_ply(cloud_path)
    out = _out_dir(args)
    views = {"all": ds.views, "train": ds.train_views, "test": ds.test_views}[args.views]
    rc = cfg.render_config()
    for v in views:
        _save_render(out, v.id, render(cloud, v, rc))
    return 0


def _load_point_set(path: Path) -> np.ndarray:
    if path.suffix == ".ply":
        return load_ply(path).positions
    rows = [
        [float(x) for x in line.split()[:3]]
        for line in path.read_text().splitlines()
        if line.strip() and not line.startswith("#")
    ]
    return np.array(rows)


def cmd_eval(args) -> int:
    pred_path = _require(Path(args.pred), "prediction")
    gt_path = _require(Path(args.gt), "ground truth")
    out = _out_dir(args)

    if gt_path.is_dir():
        ds = load_dataset(gt_path, test_every=args.test_every)
        gt_points = ds.surface_points
        if gt_points is None and ds.initial_points is not None:
            gt_points = ds.initial_points
    else:
        ds = None
        gt_points = _load_point_set(gt_path)
    if gt_points is None:
        raise UsageError("ground truth has no surface points")

    lines = []
    if args.fused:
        if ds is None:
            raise UsageError("--fused needs a dataset directory as --gt")
        cloud = load_ply(pred_path)
        report = evaluate_reconstruction(cloud, ds, tau=args.tau)
        report.write(out / "report.txt", out / "per_view.csv")
        lines = report.lines()
    else:
        pred_points = _load_point_set(pred_path)
        tau = args.tau
        if tau is None:
            lo, hi = gt_points.min(axis=0), gt_points.max(axis=0)
            tau = 0.01 * float(np.linalg.norm(hi - lo))
        c = chamfer(pred_points, gt_points)
        f = f1_score(pred_points, gt_points, tau)
        lines = [
            f"d2s = {c.d2s:.10g}",
            f"s2d = {c.s2d:.10g}",
            f"cd = {c.cd:.10g}",
            f"precision = {f.precision:.10g}",
            f"recall = {f.recall:.10g}",
            f"f1 = {f.f1:.10g}",
            f"tau = {tau:.10g}",
        ]
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line, file=sys.stderr)
    return 0


def cmd_pipeline(args) -> int:
    cfg = _build_config(args)
    out = _out_dir(args)

    ds = generate_synthetic_scene(
        recipe=args.recipe, n_views=args.views, image_size=args.image_size,
        seed=cfg.seed, test_every=cfg.test_every,
    )
    if args.rate > 0:
        ds = inject_distractors(ds, DistractorSpec(rate=args.rate, seed=cfg.seed))
    save_dataset(ds, out / "dataset")

    fdir = out / "features"
    fdir.mkdir(exist_ok=True)
    source = feature_source(ds, args.feature_mode, seed=cfg.seed)
    for v in ds.views:
        write_feature_map(fdir / f"{v.id}.mvfm", source.for_image(v.id))

    state = train_coarse(ds, cfg, progress=_progress)
    save_ply(state.cloud, out / "coarse_cloud.ply")
    rdir = out / "renders_coarse"
    rdir.mkdir(exist_ok=True)
    for vid, res in state.renders.items():
        _save_render(rdir, vid, res)

    refiner = _make_refiner(args, ds)
    mdir = out / "masks"
    mdir.mkdir(exist_ok=True)
    masks = generate_masks(state, ds, source, refiner, cfg, out_dir=mdir / "stages")
    for vid, m in masks.items():
        save_mask(m.grid, mdir / f"{vid}.png")

    cloud = train_full(state, ds, masks, cfg, progress=_progress)
    save_ply(cloud, out / "final_cloud.ply")
    write_training_log(state, out / "train_log.csv")

    rdir = out / "renders_final"
    rdir.mkdir(exist_ok=True)
    rc = cfg.render_config()
    for v in ds.views:
        _save_render(rdir, v.id, render(cloud, v, rc))

    report = evaluate_reconstruction(cloud, ds, threads=cfg.threads)
    summary = report.lines()
    summary.append(f"gaussians = {len(cloud)}")
    summary.append(f"final_cloud_sha256 = {_sha256(out / 'final_cloud.ply')}")
    summary.append(f"seed = {cfg.seed}")
    summary.append(f"rate = {args.rate:.10g}")
    (out / "report.txt").write_text("\n".join(summary) + "\n")
    report.write(out / "metrics.txt", out / "per_view.csv")
    for line in summary:
        print(line, file=sys.stderr)
    return 0


# --- argument wiring ----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="surfsplat", description=__doc__)
    parser.add_argument(
        "--version", action="version",
        version=f"surfsplat {__version__} (formats: {FORMAT_VERSIONS})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    p.add_argument("--recipe", default="plane", choices=["plane", "blobs"])
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-every", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("inject", help="composite distractor shapes over training views")
    p.add_argument("--dataset", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", default=None)
    p.add_argument("--size-range", default=None)
    p.add_argument("--test-every", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inject)

    p = sub.add_parser("features", help="write synthetic feature maps (MVFM)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", default="oracle_orthogonal", choices=["oracle_orthogonal", "photometric"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-every", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_features)

    p = sub.add_parser("train-coarse", help="stage-one reconstruction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--normalize", action="store_true", help="rescale the scene before training")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_coarse)

    p = sub.add_parser("masks", help="distractor-mask generation from coarse renders")
    p.add_argument("--dataset", required=True)
    p.add_argument("--coarse", required=True)
    p.add_argument("--feature-mode", default=None, choices=[None, "oracle_orthogonal", "photometric"])
    p.add_argument("--features", default=None, help="directory of <id>.mvfm for the images")
    p.add_argument("--render-features", default=None, help="directory of <id>.mvfm for the renders")
    p.add_argument("--refiner", default="passthrough", choices=["passthrough", "floodfill", "file"])
    p.add_argument("--refiner-dir", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_masks)

    p = sub.add_parser("train", help="stage-two masked retraining")
    p.add_argument("--dataset", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="multi-view contribution pruning")
    p.add_argument("--cloud", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--policy", default="remove", choices=["remove", "reset_opacity"])
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("render", help="render a cloud from dataset viewpoints")
    p.add_argument("--cloud", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--views", default="all", choices=["all", "train", "test"])
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="geometric/photometric evaluation")
    p.add_argument("--pred", required=True, help=".ply (positions) or x y z text file")
    p.add_argument("--gt", required=True, help="dataset directory or points file")
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--fused", action="store_true", help="fuse rendered depth instead of raw positions")
    p.add_argument("--test-every", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="generate, train, mask, retrain, and evaluate")
    p.add_argument("--recipe", default="plane", choices=["plane", "blobs"])
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--feature-mode", default="oracle_orthogonal", choices=["oracle_orthogonal", "photometric"])
    p.add_argument("--refiner", default="passthrough", choices=["passthrough", "floodfill", "file"])
    p.add_argument("--refiner-dir", default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: mark partial outputs
        out = getattr(args, "out", None)
        if out and Path(out).exists():
            (Path(out) / ".partial").write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
