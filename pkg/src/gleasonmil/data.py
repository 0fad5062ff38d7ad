"""Slides, manifests, and the CSV/PNG formats shared across pipeline stages.

A manifest row points at a directory of patch PNGs named
``{slide_id}_x{col}_y{row}.png``; relative paths resolve against the
manifest's own directory so datasets stay relocatable.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from gleasonmil.grading import GleasonGrade, GleasonScore, SlideLabel, slide_label_from_score

__all__ = [
    "Slide",
    "ManifestRow",
    "ManifestError",
    "SPLITS",
    "read_manifest",
    "write_manifest",
    "load_slides",
    "load_png",
    "save_png",
    "patch_sort_key",
]

SPLITS = ("train", "val", "test")

MANIFEST_FIELDS = ("slide_id", "path", "gleason_primary", "gleason_secondary", "split")

_PATCH_NAME = re.compile(r"^(?P<slide>.+)_x(?P<col>\d+)_y(?P<row>\d+)\.png$")


class ManifestError(ValueError):
    """A manifest file fails validation."""


@dataclass
class Slide:
    """A bag: one slide's patches, their grid coordinates, and its label."""

    slide_id: str
    score: GleasonScore
    label: SlideLabel
    split: str
    patch_ids: list[str]
    grids: np.ndarray       # (N, 2) columns are (grid_col, grid_row)
    pixels: np.ndarray      # (N, side, side, 3) uint8

    @property
    def n_instances(self) -> int:
        return len(self.patch_ids)


@dataclass
class ManifestRow:
    slide_id: str
    path: str
    primary: str            # "3", "4", "5" or "NC"
    secondary: str
    split: str

    @property
    def score(self) -> GleasonScore:
        if self.primary == "NC":
            return GleasonScore.benign()
        return GleasonScore(int(self.primary), int(self.secondary))


def _grade_field(value: str, row_number: int, column: str) -> str:
    value = value.strip()
    if value not in ("NC", "3", "4", "5"):
        raise ManifestError(
            f"manifest row {row_number}: {column} must be one of NC/3/4/5, got {value!r}")
    return value


def read_manifest(path: str | Path) -> list[ManifestRow]:
    """Parse and validate a manifest CSV; errors name the offending row."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise ManifestError(
                f"manifest {path}: header must be {','.join(MANIFEST_FIELDS)}, "
                f"got {reader.fieldnames}")
        for i, record in enumerate(reader, start=2):
            slide_id = (record["slide_id"] or "").strip()
            if not slide_id:
                raise ManifestError(f"manifest row {i}: empty slide_id")
            if slide_id in seen:
                raise ManifestError(f"manifest row {i}: duplicate slide_id {slide_id!r}")
            seen.add(slide_id)
            primary = _grade_field(record["gleason_primary"], i, "gleason_primary")
            secondary = _grade_field(record["gleason_secondary"], i, "gleason_secondary")
            if (primary == "NC") != (secondary == "NC"):
                raise ManifestError(
                    f"manifest row {i}: primary and secondary must both be NC or both be grades")
            split = (record["split"] or "").strip()
            if split not in SPLITS:
                raise ManifestError(
                    f"manifest row {i}: split must be one of {'/'.join(SPLITS)}, got {split!r}")
            rows.append(ManifestRow(slide_id, (record["path"] or "").strip(),
                                    primary, secondary, split))
    return rows


def write_manifest(rows: list[ManifestRow], path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(MANIFEST_FIELDS)
        for row in rows:
            writer.writerow([row.slide_id, row.path, row.primary, row.secondary, row.split])


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.uint8)


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def patch_sort_key(name: str) -> tuple[int, int]:
    """Row-major ordering key (grid_row, grid_col) from a patch filename."""
    match = _PATCH_NAME.match(name)
    if match is None:
        raise ValueError(f"not a patch filename: {name!r}")
    return int(match.group("row")), int(match.group("col"))


def load_slides(manifest_path: str | Path, split: str | None = None) -> list[Slide]:
    """Load all slides (optionally one split) with patches in memory,
    ordered row-major by grid position."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent
    slides: list[Slide] = []
    for row in rows:
        if split is not None and row.split != split:
            continue
        patch_dir = Path(row.path)
        if not patch_dir.is_absolute():
            patch_dir = base / patch_dir
        if not patch_dir.is_dir():
            raise ManifestError(f"slide {row.slide_id}: patch directory not found: {patch_dir}")
        names = sorted((p.name for p in patch_dir.glob("*.png")), key=patch_sort_key)
        if not names:
            raise ManifestError(f"slide {row.slide_id}: no patches in {patch_dir}")
        grids = []
        pixels = []
        for name in names:
            match = _PATCH_NAME.match(name)
            grids.append((int(match.group("col")), int(match.group("row"))))
            pixels.append(load_png(patch_dir / name))
        score = row.score
        slides.append(Slide(
            slide_id=row.slide_id,
            score=score,
            label=slide_label_from_score(score),
            split=row.split,
            patch_ids=[name[:-len(".png")] for name in names],
            grids=np.asarray(grids, dtype=np.int64),
            pixels=np.stack(pixels),
        ))
    return slides
