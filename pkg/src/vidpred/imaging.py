from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def to_uint8(frame) -> np.ndarray:
    """``(3, H, W)`` float in [0, 1] -> ``(H, W, 3)`` uint8."""
    a = np.asarray(frame, dtype=np.float64)
    return np.round(np.clip(a, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_frame(path: str | Path, frame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(frame)).save(path)
    return path


def save_strip(path: str | Path, rows: Sequence[Sequence], gap: int = 2) -> Path:
    """Grid image: one row per frame list (e.g. ground truth over prediction)."""
    tiles = [[to_uint8(f) for f in row] for row in rows]
    h, w = tiles[0][0].shape[:2]
    n_cols = max(len(r) for r in tiles)
    canvas = np.full((len(tiles) * (h + gap) - gap, n_cols * (w + gap) - gap, 3), 255, np.uint8)
    for i, row in enumerate(tiles):
        for j, t in enumerate(row):
            canvas[i * (h + gap):i * (h + gap) + h, j * (w + gap):j * (w + gap) + w] = t
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    return path
