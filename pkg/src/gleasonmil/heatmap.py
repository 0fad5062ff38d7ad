"""Pixel-level grade maps from patch-grid probabilities.

Patch probability vectors are anchored at the patch centers of the tiling
grid; the map bilinearly interpolates between the four nearest anchors and
clamps beyond the outer ones, so every pixel stays a convex combination of
anchor vectors. The overlay colors the per-pixel argmax class (GG3 green,
GG4 blue, GG5 red) at a fixed alpha of 0.45; NC and non-tissue pixels stay
transparent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ProbGrid", "probability_map", "class_overlay", "OVERLAY_PALETTE", "OVERLAY_ALPHA"]

OVERLAY_PALETTE = {1: (0, 255, 0), 2: (0, 0, 255), 3: (255, 0, 0)}
OVERLAY_ALPHA = 0.45


@dataclass
class ProbGrid:
    """R x C x 4 patch probabilities on the tiling grid.

    Grid cells without a kept patch hold the NC one-hot fill vector.
    """

    probs: np.ndarray
    stride: int
    window: int

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[2] != 4 or probs.shape[0] == 0 or probs.shape[1] == 0:
            raise ValueError("expected a nonempty R x C x 4 probability grid")
        sums = probs.sum(axis=2)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("each grid cell must hold a probability vector summing to 1")
        if self.stride < 1 or self.window < 1:
            raise ValueError("stride and window must be >= 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_patches(cls, entries, stride: int, window: int,
                     fill: np.ndarray | None = None) -> "ProbGrid":
        """Build a dense grid from (grid_col, grid_row, probs) entries;
        missing cells get ``fill`` (default: NC one-hot)."""
        entries = list(entries)
        if not entries:
            raise ValueError("no patch probabilities given")
        if fill is None:
            fill = np.array([1.0, 0.0, 0.0, 0.0])
        n_cols = max(c for c, _, _ in entries) + 1
        n_rows = max(r for _, r, _ in entries) + 1
        probs = np.tile(fill, (n_rows, n_cols, 1))
        for col, row, p in entries:
            probs[row, col] = np.asarray(p, dtype=np.float64)
        return cls(probs, stride, window)


def _axis_coordinates(n_anchors: int, out_size: int, stride: int, window: int):
    """Anchor index and interpolation weight per output pixel along one axis."""
    centers0 = window / 2.0
    t = (np.arange(out_size) - centers0) / stride
    t = np.clip(t, 0.0, n_anchors - 1.0)
    i0 = np.minimum(t.astype(np.int64), max(n_anchors - 2, 0))
    frac = t - i0
    if n_anchors == 1:
        frac = np.zeros_like(t)
    return i0, frac


def probability_map(grid: ProbGrid, out_h: int, out_w: int) -> np.ndarray:
    """H x W x 4 bilinear interpolation of the grid's patch probabilities."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    probs = grid.probs
    n_rows, n_cols = probs.shape[:2]
    row0, row_frac = _axis_coordinates(n_rows, out_h, grid.stride, grid.window)
    col0, col_frac = _axis_coordinates(n_cols, out_w, grid.stride, grid.window)
    row1 = np.minimum(row0 + 1, n_rows - 1)
    col1 = np.minimum(col0 + 1, n_cols - 1)

    top = (probs[row0[:, None], col0[None, :]] * (1 - col_frac)[None, :, None]
           + probs[row0[:, None], col1[None, :]] * col_frac[None, :, None])
    bottom = (probs[row1[:, None], col0[None, :]] * (1 - col_frac)[None, :, None]
              + probs[row1[:, None], col1[None, :]] * col_frac[None, :, None])
    return top * (1 - row_frac)[:, None, None] + bottom * row_frac[:, None, None]


def class_overlay(prob_map: np.ndarray, tissue_mask: np.ndarray,
                  palette: dict[int, tuple[int, int, int]] | None = None) -> np.ndarray:
    """8-bit RGBA overlay of the per-pixel argmax class over tissue."""
    prob_map = np.asarray(prob_map, dtype=np.float64)
    tissue_mask = np.asarray(tissue_mask, dtype=bool)
    if prob_map.ndim != 3 or prob_map.shape[2] != 4:
        raise ValueError("expected an H x W x 4 probability map")
    if tissue_mask.shape != prob_map.shape[:2]:
        raise ValueError("tissue mask shape does not match the probability map")
    palette = palette or OVERLAY_PALETTE
    hard = np.argmax(prob_map, axis=2)  # ties resolve to the lowest class
    overlay = np.zeros(prob_map.shape[:2] + (4,), dtype=np.uint8)
    alpha = int(round(OVERLAY_ALPHA * 255))
    for class_index, color in palette.items():
        where = (hard == class_index) & tissue_mask
        overlay[where, :3] = color
        overlay[where, 3] = alpha
    return overlay
