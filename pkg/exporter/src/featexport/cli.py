"""featexport: offline feature extraction and prompt-based mask refinement.

Exit codes: 0 success, 1 usage error, 2 backend/runtime failure. On failure no
partial output files are left behind (writes go to a temp name, then rename).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .backends import BackendUnavailable, make_feature_backend, make_segment_backend
from .formats import STRIDE, load_image, read_prompts, write_mask, write_mvfm

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic(path: Path, write_fn) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _atomic_mask(path: Path, mask) -> None:
    tmp = path.with_name(path.name + ".tmp.png")  # PIL picks the format by suffix
    write_mask(tmp, mask)
    os.replace(tmp, path)


def cmd_export_features(args) -> int:
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise UsageError(f"image directory not found: {image_dir}")
    images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise UsageError(f"no images in {image_dir}")

    kw = {}
    if args.backend == "dinov2":
        kw = {"model_id": args.feature_model, "device": args.device}
    backend = make_feature_backend(args.backend, **kw)  # load before writing anything

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in images:
        grid = backend.extract(load_image(path))
        target = out / (path.stem + ".mvfm")
        _atomic(target, lambda tmp: write_mvfm(tmp, grid, stride=STRIDE))
        print(f"{path.name} -> {target.name} {grid.shape}", file=sys.stderr)
    return 0


def cmd_refine(args) -> int:
    image_path = Path(args.image)
    prompt_path = Path(args.prompts)
    if not image_path.exists():
        raise UsageError(f"image not found: {image_path}")
    if not prompt_path.exists():
        raise UsageError(f"prompt file not found: {prompt_path}")

    prompts = read_prompts(prompt_path)
    image = load_image(image_path)

    kw = {}
    if args.backend == "sam":
        if not args.checkpoint:
            raise UsageError("--backend sam needs --checkpoint")
        kw = {"checkpoint": args.checkpoint, "model_type": args.sam_model, "device": args.device}
    backend = make_segment_backend(args.backend, **kw)

    if len(prompts.positives) == 0:
        import numpy as np

        mask = np.zeros(image.shape[:2], dtype="uint8")
        print("warning: no positive prompts; writing an empty mask", file=sys.stderr)
    else:
        mask = backend.segment(image, prompts)
        if not mask.any():
            print("warning: zero accepted components; mask is empty", file=sys.stderr)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _atomic(out, lambda tmp: write_mask(tmp.with_suffix(".png"), mask) or os.replace(tmp.with_suffix(".png"), tmp))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="featexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-features", help="write one MVFM file per image")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", default="dinov2", choices=["dinov2", "builtin"])
    p.add_argument("--feature-model", default="dinov2_vits14",
                   help="torch-hub DINOv2 variant; the small model matches the 384-channel contract")
    p.add_argument("--device", default="cpu")
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("refine", help="prompt-based mask for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--prompts", required=True, help="text file: `x y label` per line")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--backend", default="sam", choices=["sam", "builtin"])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--sam-model", default="vit_b")
    p.add_argument("--device", default="cpu")
    p.set_defaults(fn=cmd_refine)
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
    except BackendUnavailable as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
