"""Weakly-supervised teacher-student MIL pipeline for Gleason grading.

The package trains a patch-level Gleason-grade classifier and a slide-level
Grade Group scorer from slide-level Gleason scores only, and ships a
deterministic synthetic-slide harness so every mechanism is verifiable at
desk scale.
"""

from gleasonmil.grading import (
    GleasonGrade,
    GleasonScore,
    GradeGroup,
    SlideLabel,
    score_from_patch_labels,
    score_to_grade_group,
    slide_label_from_score,
)

__version__ = "0.1.0"

__all__ = [
    "GleasonGrade",
    "GleasonScore",
    "GradeGroup",
    "SlideLabel",
    "score_from_patch_labels",
    "score_to_grade_group",
    "slide_label_from_score",
    "__version__",
]
