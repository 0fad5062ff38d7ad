"""Gleason label algebra: grades, scores, Grade Groups and slide-level labels.

Serialization conventions used across manifests, pseudo-label files and
reports: grades are "NC", "GG3", "GG4", "GG5"; scores are "P+S" strings
(e.g. "3+4") with "NC" for benign.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

__all__ = [
    "GleasonGrade",
    "GleasonScore",
    "GradeGroup",
    "SlideLabel",
    "score_to_grade_group",
    "slide_label_from_score",
    "score_from_patch_labels",
    "score_to_score_class",
    "SCORE_CLASS_NAMES",
]


class GleasonGrade(IntEnum):
    """Patch-level class with a fixed ordinal index (NC < GG3 < GG4 < GG5)."""

    NC = 0
    GG3 = 1
    GG4 = 2
    GG5 = 3

    @property
    def pattern(self) -> int | None:
        """Gleason pattern number (3/4/5), or None for non-cancerous."""
        return None if self is GleasonGrade.NC else self.value + 2

    @classmethod
    def from_pattern(cls, pattern: int) -> "GleasonGrade":
        if pattern not in (3, 4, 5):
            raise ValueError(f"invalid Gleason pattern {pattern!r}, expected 3, 4 or 5")
        return cls(pattern - 2)

    @classmethod
    def parse(cls, text: str) -> "GleasonGrade":
        try:
            return cls[text.strip()]
        except KeyError:
            raise ValueError(f"unknown grade {text!r}, expected one of NC/GG3/GG4/GG5") from None


class GradeGroup(IntEnum):
    """ISUP prognostic group; 0 is used for benign slides."""

    BENIGN = 0
    GG1 = 1
    GG2 = 2
    GG3 = 3
    GG4 = 4
    GG5 = 5


@dataclass(frozen=True)
class GleasonScore:
    """Primary + secondary Gleason patterns of a slide.

    ``primary``/``secondary`` are pattern numbers in {3, 4, 5}, or both
    None for a benign slide.
    """

    primary: int | None
    secondary: int | None

    def __post_init__(self) -> None:
        if (self.primary is None) != (self.secondary is None):
            raise ValueError("primary and secondary must both be set or both be benign")
        for value in (self.primary, self.secondary):
            if value is not None and value not in (3, 4, 5):
                raise ValueError(f"invalid Gleason pattern {value!r}")

    @property
    def is_benign(self) -> bool:
        return self.primary is None

    @classmethod
    def benign(cls) -> "GleasonScore":
        return cls(None, None)

    def __str__(self) -> str:
        if self.is_benign:
            return "NC"
        return f"{self.primary}+{self.secondary}"

    @classmethod
    def parse(cls, text: str) -> "GleasonScore":
        text = text.strip()
        if text in ("NC", "BENIGN", "benign", "0"):
            return cls.benign()
        if "+" in text:
            left, _, right = text.partition("+")
            try:
                return cls(int(left), int(right))
            except ValueError:
                pass
        raise ValueError(f"cannot parse Gleason score {text!r}, expected 'P+S' or 'NC'")


@dataclass(frozen=True)
class SlideLabel:
    """Multi-hot class presence over (NC, GG3, GG4, GG5).

    NC presence is always 1: every slide is assumed to contain some
    non-cancerous tissue.
    """

    presence: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.presence) != 4 or any(p not in (0, 1) for p in self.presence):
            raise ValueError(f"presence must be a 4-long 0/1 vector, got {self.presence!r}")
        if self.presence[0] != 1:
            raise ValueError("NC presence must always be 1")

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.presence, dtype=np.float64)

    @property
    def cancerous(self) -> np.ndarray:
        """Presence of the three cancerous classes (GG3, GG4, GG5)."""
        return np.asarray(self.presence[1:], dtype=np.float64)

    @property
    def is_benign(self) -> bool:
        return sum(self.presence[1:]) == 0

    def contains(self, grade: GleasonGrade) -> bool:
        return bool(self.presence[grade.value])


def score_to_grade_group(score: GleasonScore) -> GradeGroup:
    """Map a Gleason score to its ISUP Grade Group (0 for benign).

    The 3+4 / 4+3 split lands in groups 2 and 3 respectively; otherwise the
    group is determined by the pattern sum.
    """
    if score.is_benign:
        return GradeGroup.BENIGN
    total = score.primary + score.secondary
    if total <= 6:
        return GradeGroup.GG1
    if total == 7:
        return GradeGroup.GG2 if score.primary == 3 else GradeGroup.GG3
    if total == 8:
        return GradeGroup.GG4
    return GradeGroup.GG5


def slide_label_from_score(score: GleasonScore) -> SlideLabel:
    """Multi-hot slide label: NC always present plus the score's grades."""
    presence = [1, 0, 0, 0]
    if not score.is_benign:
        presence[GleasonGrade.from_pattern(score.primary).value] = 1
        presence[GleasonGrade.from_pattern(score.secondary).value] = 1
    return SlideLabel(tuple(presence))


def score_from_patch_labels(labels: Iterable[GleasonGrade]) -> GleasonScore:
    """Derive the slide score from a population of patch grades.

    Primary is the most frequent cancerous grade, secondary the next most
    frequent; frequency ties break toward the more severe grade. A slide
    with a single cancerous grade gets secondary = primary; one with no
    cancerous patches is benign.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("empty slide")
    counts = Counter(g for g in labels if g is not GleasonGrade.NC)
    if not counts:
        return GleasonScore.benign()
    # Sort by (count, severity) descending so ties break toward severity.
    ranked = sorted(counts, key=lambda g: (counts[g], g.value), reverse=True)
    primary = ranked[0].pattern
    secondary = ranked[1].pattern if len(ranked) > 1 else primary
    return GleasonScore(primary, secondary)


SCORE_CLASS_NAMES = ("NC", "GS6", "GS7", "GS8", "GS9", "GS10")


def score_to_score_class(score: GleasonScore) -> int:
    """Ordinal score class: 0 for benign, 1..5 for pattern sums 6..10.

    This is the slide-level label space used alongside Grade Groups for
    biopsy scoring; class names are in ``SCORE_CLASS_NAMES``.
    """
    if score.is_benign:
        return 0
    return score.primary + score.secondary - 5
