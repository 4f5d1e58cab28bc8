"""Wire formats shared with the reconstruction toolkit.

The exporter talks to the consumer purely through files, so the formats are
implemented here independently:

* MVFM feature maps: magic "MVFM", u32 H_f W_f C stride, then little-endian
  f32, row-major, channel-contiguous per cell.
* Masks: 8-bit single-channel PNG, 255 = distractor.
* Prompts: text, one "x y label" per line (label 1 positive, 0 negative).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"MVFM"
CHANNELS = 384
STRIDE = 14


def grid_shape(height: int, width: int, stride: int = STRIDE) -> tuple[int, int]:
    return (-(-height // stride), -(-width // stride))


def write_mvfm(path: str | Path, grid: np.ndarray, stride: int = STRIDE) -> None:
    grid = np.ascontiguousarray(grid, dtype="<f4")
    if grid.ndim != 3:
        raise ValueError("feature grid must be H_f x W_f x C")
    hf, wf, c = grid.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", hf, wf, c, stride))
        f.write(grid.tobytes())


def read_mvfm(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"not an MVFM file: {path}")
    hf, wf, c, stride = struct.unpack("<IIII", raw[4:20])
    grid = np.frombuffer(raw, dtype="<f4", count=hf * wf * c, offset=20)
    return grid.reshape(hf, wf, c).astype(np.float64), stride


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    arr = ((np.asarray(mask) != 0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) >= 128).astype(np.uint8)


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class Prompts:
    positives: np.ndarray  # (n, 2) as (x, y)
    negatives: np.ndarray  # (m, 2)


def read_prompts(path: str | Path) -> Prompts:
    pos, neg = [], []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        x, y, label = line.split()
        (pos if int(label) == 1 else neg).append((int(x), int(y)))
    return Prompts(
        positives=np.array(pos, dtype=int).reshape(-1, 2),
        negatives=np.array(neg, dtype=int).reshape(-1, 2),
    )
