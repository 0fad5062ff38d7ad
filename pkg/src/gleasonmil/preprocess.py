"""Tissue masking and patch tiling of slide images.

Stained tissue is darker than the white slide background, so the tissue
mask keeps pixels at or below the Otsu threshold of the grayscale image.
Grayscale is the unweighted integer mean of the three channels (floor),
which keeps masks exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Patch",
    "DegenerateHistogramError",
    "otsu_threshold",
    "tissue_mask",
    "tile_slide",
    "patch_filename",
]


class DegenerateHistogramError(ValueError):
    """All histogram mass sits in a single bin; no threshold separates it."""


@dataclass
class Patch:
    """A tile cut from a slide on the stride grid."""

    pixels: np.ndarray  # (side, side, 3) uint8
    grid_col: int
    grid_row: int
    tissue_fraction: float

    def offsets(self, stride: int) -> tuple[int, int]:
        """Pixel offsets (x, y) of the patch's top-left corner."""
        return self.grid_col * stride, self.grid_row * stride


def otsu_threshold(histogram: np.ndarray) -> int:
    """Between-class-variance-maximizing cut over a 256-bin histogram.

    A threshold t splits intensities into {0..t} and {t+1..255}; the
    smallest maximizer wins ties. Raises DegenerateHistogramError when all
    mass sits in one bin (every cut leaves a class empty).
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,) or hist.min() < 0:
        raise ValueError("histogram must be a nonnegative 256-bin count vector")
    total = hist.sum()
    if total <= 0:
        raise ValueError("histogram must contain at least one count")
    if np.count_nonzero(hist) == 1:
        raise DegenerateHistogramError("all histogram mass in a single bin")

    levels = np.arange(256, dtype=np.float64)
    weight0 = np.cumsum(hist)[:-1]          # mass of {0..t} for t in 0..254
    weight1 = total - weight0
    cum_mean = np.cumsum(hist * levels)[:-1]
    grand_mean = float((hist * levels).sum())
    # sigma_b^2(t) = w0 w1 (mu0 - mu1)^2, 0 where a class is empty.
    valid = (weight0 > 0) & (weight1 > 0)
    mean0 = np.divide(cum_mean, weight0, out=np.zeros(255), where=valid)
    mean1 = np.divide(grand_mean - cum_mean, weight1, out=np.zeros(255), where=valid)
    variance = np.where(valid, weight0 * weight1 * (mean0 - mean1) ** 2, 0.0)
    return int(np.argmax(variance))


def _grayscale(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    return (pixels.astype(np.uint32).sum(axis=2) // 3).astype(np.uint8)


def tissue_mask(pixels: np.ndarray) -> np.ndarray:
    """Boolean H x W foreground mask: gray value at or below the Otsu cut.

    An image whose grayscale histogram is degenerate (e.g. all white) has
    no separable foreground and yields an all-false mask.
    """
    gray = _grayscale(pixels)
    if gray.size == 0:
        raise ValueError("empty image")
    hist = np.bincount(gray.ravel(), minlength=256).astype(np.float64)
    try:
        threshold = otsu_threshold(hist)
    except DegenerateHistogramError:
        return np.zeros(gray.shape, dtype=bool)
    return gray <= threshold


def tile_slide(pixels: np.ndarray, window: int = 512, stride: int = 256,
               min_tissue: float = 0.20,
               mask: np.ndarray | None = None) -> list[Patch]:
    """Cut a slide into window-sized tiles on a stride grid.

    Offsets run 0, stride, ... up to the last full window inside the image
    (no residual edge tile); tiles whose tissue fraction is below
    ``min_tissue`` are dropped (the boundary itself is kept). Output is
    row-major. A precomputed mask may be passed to avoid recomputing it.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    if window > min(h, w):
        raise ValueError(f"slide smaller than window: image {h}x{w}, window {window}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if mask is None:
        mask = tissue_mask(pixels)
    if mask.shape != (h, w):
        raise ValueError("mask shape does not match image")

    patches = []
    for row, y in enumerate(range(0, h - window + 1, stride)):
        for col, x in enumerate(range(0, w - window + 1, stride)):
            fraction = float(mask[y:y + window, x:x + window].mean())
            if fraction >= min_tissue:
                patches.append(Patch(pixels[y:y + window, x:x + window],
                                     col, row, fraction))
    return patches


def patch_filename(slide_id: str, grid_col: int, grid_row: int) -> str:
    """Canonical on-disk name for a tiled patch."""
    return f"{slide_id}_x{grid_col}_y{grid_row}.png"
