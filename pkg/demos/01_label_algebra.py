"""Gleason label algebra: scores, Grade Groups, and slide labels.

A slide's clinical record carries a Gleason score (primary + secondary
pattern). Everything downstream derives from it: the ISUP Grade Group used
for prognosis, and the multi-hot presence label that drives bag-level
training.
"""

from gleasonmil.grading import (
    GleasonGrade,
    GleasonScore,
    score_from_patch_labels,
    score_to_grade_group,
    slide_label_from_score,
)

# The 3+4 / 4+3 distinction is the whole reason Grade Groups exist: same
# pattern sum, different prognosis.
for text in ("3+3", "3+4", "4+3", "4+4", "4+5", "NC"):
    score = GleasonScore.parse(text)
    group = score_to_grade_group(score)
    label = slide_label_from_score(score)
    print(f"score {text:>4}  ->  Grade Group {group.value}  presence {label.presence}")

# Going the other way: given the patch-level grade population of a slide,
# the two most prominent cancerous grades give the score back (frequency
# first, severity breaking ties).
population = [GleasonGrade.NC] * 10 + [GleasonGrade.GG4] * 6 + [GleasonGrade.GG3] * 2
derived = score_from_patch_labels(population)
print(f"\n10x NC + 6x GG4 + 2x GG3  ->  score {derived} "
      f"(Grade Group {score_to_grade_group(derived).value})")
