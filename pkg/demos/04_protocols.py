"""The speaker-level evaluation protocols on worked examples: binarization,
score averaging with the tie rule, binarized accuracy, the class-to-percent
map, and Pearson correlation.

Run: python3 demos/04_protocols.py
"""

import numpy as np

from spice.labels import IntelligibilityClass
from spice.metrics import (
    binarize_mildplus,
    binarized_accuracy,
    intelligibility_percent,
    ovr_auc,
    pearson,
    speaker_aggregate,
)

print("binary task grouping:")
for c in IntelligibilityClass:
    side = "typical" if binarize_mildplus(c) == 0 else "atypical"
    print(f"  {c.name:<9} -> {side}")

print("\nspeaker aggregation (mean of score vectors, argmax, ties go mild):")
scores = np.array([
    [0.50, 0.30, 0.10, 0.05, 0.05],   # speaker A, utt 1
    [0.10, 0.50, 0.20, 0.10, 0.10],   # speaker A, utt 2
    [0.05, 0.05, 0.10, 0.30, 0.50],   # speaker B, utt 1
])
for sp in speaker_aggregate(["a1", "a2", "b1"], ["A", "A", "B"], scores):
    print(f"  {sp.speaker_id}: mean {np.round(sp.mean_scores, 3)} "
          f"-> class {sp.predicted_class}")

print("\nbinarized accuracy for a typical speaker whose model wobbles:")
wobble = np.array([[0.6, 0.4, 0, 0, 0]] * 3 + [[0.2, 0.8, 0, 0, 0]] * 1)
print(f"  3 of 4 utterances argmax typical -> {binarized_accuracy(wobble, 0):.0f}%")

print("\nclass -> intelligibility percent (map then average):")
preds = [1, 1, 2]
print(f"  predictions {preds} -> {intelligibility_percent(preds):.0f}%")

print("\nPearson between predicted and reference speaker percentages:")
ref = [100, 90, 60, 40, 20]
noisy = [96, 88, 65, 38, 25]
print(f"  r = {pearson(noisy, ref):.4f}")

print("\nper-class AUC with an absent class reports NA:")
two_class_scores = np.array([[0.9, 0.1, 0, 0, 0], [0.2, 0.8, 0, 0, 0]])
mean_auc, per_class = ovr_auc(two_class_scores, [0, 1], 5)
print(f"  per-class: {['NA' if a is None else round(a, 2) for a in per_class]}")
print(f"  mean over defined classes: {mean_auc}")
