"""Channel-wise histogram matching to a reference image.

This is the first stage of the color-homogenization chain; a
structure-preserving normalizer can be plugged in behind it via
``NormalizationHook``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "ReferenceProfile",
    "build_reference",
    "histogram_match",
    "NormalizationHook",
]

# Optional post-matching stage (e.g. a structure-preserving method).
NormalizationHook = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ReferenceProfile:
    """Per-channel cumulative intensity distributions of a reference image."""

    cdfs: np.ndarray  # (3, 256) nondecreasing, each ending at 1.0

    def __post_init__(self) -> None:
        cdfs = np.asarray(self.cdfs, dtype=np.float64)
        if cdfs.shape != (3, 256):
            raise ValueError("profile must hold 3 x 256 CDF values")
        if np.any(np.diff(cdfs, axis=1) < 0) or not np.allclose(cdfs[:, -1], 1.0):
            raise ValueError("each CDF must be nondecreasing and end at 1.0")
        object.__setattr__(self, "cdfs", cdfs)

    def save(self, path: str | Path) -> None:
        np.savetxt(path, self.cdfs.T, fmt="%.10f",
                   header="per-channel intensity CDFs (columns R,G,B)")

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceProfile":
        values = np.loadtxt(path)
        if values.shape != (256, 3):
            raise ValueError(f"reference profile {path} must hold 256 x 3 values")
        return cls(values.T)


def _channel_cdfs(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.size == 0:
        raise ValueError("expected a nonempty H x W x 3 image")
    cdfs = np.empty((3, 256), dtype=np.float64)
    n = pixels.shape[0] * pixels.shape[1]
    for c in range(3):
        hist = np.bincount(pixels[..., c].ravel(), minlength=256)
        cdfs[c] = np.cumsum(hist) / n
    return cdfs


def build_reference(pixels: np.ndarray) -> ReferenceProfile:
    """Normalized per-channel CDFs of a reference image."""
    return ReferenceProfile(_channel_cdfs(pixels))


def histogram_match(pixels: np.ndarray, ref: ReferenceProfile,
                    hook: NormalizationHook | None = None) -> np.ndarray:
    """Remap each channel so its intensity distribution follows the reference.

    Each source intensity v maps to the smallest reference intensity u with
    refCDF(u) >= srcCDF(v), which makes the mapping monotone and the whole
    operation idempotent on 8-bit outputs. ``hook``, when given, runs on the
    matched image (plug-in point for a structure-preserving method).
    """
    pixels = np.asarray(pixels)
    src = _channel_cdfs(pixels)
    out = np.empty_like(pixels, dtype=np.uint8)
    for c in range(3):
        # searchsorted 'left' returns the smallest u with refCDF[u] >= value.
        lut = np.searchsorted(ref.cdfs[c], src[c], side="left")
        out[..., c] = np.clip(lut, 0, 255).astype(np.uint8)[pixels[..., c]]
    if hook is not None:
        out = hook(out)
    return out
