"""Plain-text PPM (P3) export of token grids."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError

# 16 distinguishable colours; token id -> RGB.
DEFAULT_PALETTE: dict[int, tuple[int, int, int]] = {
    0: (230, 25, 75), 1: (60, 180, 75), 2: (255, 225, 25), 3: (0, 130, 200),
    4: (245, 130, 48), 5: (145, 30, 180), 6: (70, 240, 240), 7: (240, 50, 230),
    8: (210, 245, 60), 9: (250, 190, 212), 10: (0, 128, 128), 11: (220, 190, 255),
    12: (170, 110, 40), 13: (128, 0, 0), 14: (128, 128, 128), 15: (0, 0, 0),
}
SEPARATOR_RGB = (255, 255, 255)


def _rgb(grid: np.ndarray, palette: dict[int, tuple[int, int, int]], mask_id: int | None) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise InputError(f"grid must be 2-D, got shape {grid.shape}")
    if mask_id is not None and (grid == mask_id).any():
        raise InputError("grid still contains MASK tokens")
    out = np.empty(grid.shape + (3,), dtype=np.int64)
    for tok in np.unique(grid):
        if int(tok) not in palette:
            raise InputError(f"token id {int(tok)} has no palette entry")
        out[grid == tok] = palette[int(tok)]
    return out


def ppm_text(rgb: np.ndarray) -> str:
    h, w, _ = rgb.shape
    body = "\n".join(" ".join(str(int(v)) for v in px) for px in rgb.reshape(-1, 3))
    return f"P3\n{w} {h}\n255\n{body}\n"


def export_grid_image(grid: np.ndarray, palette: dict[int, tuple[int, int, int]], path: str | Path,
                      mask_id: int | None = None) -> Path:
    """Write one fully unmasked grid as a P3 image."""
    path = Path(path)
    path.write_text(ppm_text(_rgb(grid, palette, mask_id)))
    return path


def export_side_by_side(grids: Sequence[np.ndarray], palette: dict[int, tuple[int, int, int]], path: str | Path,
                        mask_id: int | None = None) -> Path:
    """Tile equal-height grids left to right with a 1-pixel separator column between them."""
    if not grids:
        raise InputError("no grids to export")
    tiles = [_rgb(g, palette, mask_id) for g in grids]
    h = tiles[0].shape[0]
    if any(t.shape[0] != h for t in tiles):
        raise InputError("side-by-side grids must share a height")
    sep = np.broadcast_to(np.array(SEPARATOR_RGB), (h, 1, 3))
    parts = [tiles[0]]
    for t in tiles[1:]:
        parts += [sep, t]
    path = Path(path)
    path.write_text(ppm_text(np.concatenate(parts, axis=1)))
    return path
