"""Utterance- and speaker-level evaluation: accuracy, macro-F1, one-vs-rest
AUC, binarization, speaker aggregation, intelligibility-percentage mapping,
and Pearson correlation.

AUC follows the Mann-Whitney convention: ties between a positive and a
negative score count one half. Classes lacking either a positive or a
negative example are reported as NA (None), not zero.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .labels import IntelligibilityClass

# class index -> intelligibility percentage
DEFAULT_CLASS_MAP = (100.0, 90.0, 60.0, 40.0, 20.0)

TYPICAL = 0
ATYPICAL = 1


class ZeroVarianceError(ValueError):
    pass


def binarize_mildplus(label: int) -> int:
    """TYPICAL -> 0; mild, moderate, severe, profound -> 1 (atypical)."""
    label = int(label)
    if label not in (0, 1, 2, 3, 4):
        raise ValueError(f"invalid class {label}")
    return TYPICAL if label == IntelligibilityClass.TYPICAL else ATYPICAL


def accuracy(pred, ref) -> float:
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {ref.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(pred == ref))


def macro_f1(pred, ref, k: int) -> float:
    """Macro-averaged F1 over classes present in ref or pred; classes in
    neither are excluded from the mean."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {ref.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    f1s = []
    for c in range(k):
        in_ref = bool(np.any(ref == c))
        in_pred = bool(np.any(pred == c))
        if not in_ref and not in_pred:
            continue
        tp = float(np.sum((pred == c) & (ref == c)))
        fp = float(np.sum((pred == c) & (ref != c)))
        fn = float(np.sum((pred != c) & (ref == c)))
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1s.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return float(np.mean(f1s))


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks handle ties at 1/2
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ovr_auc(scores, ref, k: int) -> tuple[float | None, list[float | None]]:
    """Mean one-vs-rest AUC and the per-class values.

    Classes without both a positive and a negative are skipped (None); if no
    class is computable the mean itself is None (reported NA downstream).
    """
    scores = np.asarray(scores, dtype=np.float64)
    ref = np.asarray(ref)
    if scores.ndim != 2 or scores.shape[1] != k:
        raise ValueError(f"scores must be [n, {k}], got {scores.shape}")
    if scores.shape[0] != ref.shape[0]:
        raise ValueError("length mismatch between scores and references")
    if scores.shape[0] == 0:
        raise ValueError("empty input")
    per_class = [_binary_auc(scores[:, c], ref == c) for c in range(k)]
    defined = [a for a in per_class if a is not None]
    mean = float(np.mean(defined)) if defined else None
    return mean, per_class


@dataclass
class SpeakerPrediction:
    speaker_id: str
    mean_scores: np.ndarray
    predicted_class: int


def speaker_aggregate(utterance_ids, speaker_ids, scores) -> list[SpeakerPrediction]:
    """Average class scores per speaker and take the argmax, ties broken
    toward the lower (less severe) class.

    Scores are summed in sorted-utterance_id order so the result is
    bit-identical under any permutation of the inputs.
    """
    utterance_ids = list(utterance_ids)
    speaker_ids = list(speaker_ids)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(utterance_ids) == len(speaker_ids) == scores.shape[0]):
        raise ValueError("utterance_ids, speaker_ids and scores must align")
    if scores.shape[0] == 0:
        raise ValueError("empty input")

    order = sorted(range(len(utterance_ids)), key=lambda i: utterance_ids[i])
    groups: dict[str, list[int]] = {}
    for i in order:
        groups.setdefault(speaker_ids[i], []).append(i)

    out = []
    for spk in sorted(groups):
        rows = scores[groups[spk]]
        mean = rows.sum(axis=0) / len(rows)  # np.sum is pairwise
        out.append(SpeakerPrediction(spk, mean, int(np.argmax(mean))))
    return out


def binarized_accuracy(scores, speaker_ref_binary: int) -> float:
    """Percent of one speaker's utterances whose argmax, binarized to
    typical-vs-not, matches the speaker's binary reference."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("need a non-empty [n, k] score matrix")
    pred_binary = (np.argmax(scores, axis=1) != IntelligibilityClass.TYPICAL).astype(int)
    return float(100.0 * np.mean(pred_binary == int(speaker_ref_binary)))


def intelligibility_percent(pred_classes, class_map=DEFAULT_CLASS_MAP) -> float:
    """Map each predicted class to a percentage and average across utterances."""
    pred_classes = np.asarray(pred_classes, dtype=int)
    if pred_classes.size == 0:
        raise ValueError("empty input")
    cmap = np.asarray(class_map, dtype=np.float64)
    if np.any(np.diff(cmap) >= 0):
        warnings.warn("class map is not strictly decreasing", stacklevel=2)
    return float(np.mean(cmap[pred_classes]))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0:
        raise ZeroVarianceError("first input has zero variance")
    if sy == 0.0:
        raise ZeroVarianceError("second input has zero variance")
    return float(np.sum(dx * dy) / (sx * sy))


@dataclass
class EvalReport:
    task: int
    n_utterances: int
    class_counts: dict[int, int]
    accuracy: float
    macro_f1: float
    mean_ovr_auc: float | None
    per_class_auc: list[float | None]
    speakers: list[dict] = field(default_factory=list)
    slices: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "task": self.task,
            "n_utterances": self.n_utterances,
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "mean_ovr_auc": self.mean_ovr_auc,
            "per_class_auc": self.per_class_auc,
            "speakers": self.speakers,
            "slices": {name: sub.to_dict() for name, sub in sorted(self.slices.items())},
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def build_report(
    task: int,
    ref_labels,
    scores,
    speaker_ids=None,
    utterance_ids=None,
    slice_values=None,
) -> EvalReport:
    """Assemble the full utterance + speaker report for one evaluation set."""
    ref = np.asarray(ref_labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    k = int(task)
    pred = np.argmax(scores, axis=1)

    mean_auc, per_class = ovr_auc(scores, ref, k)
    counts = {c: int(np.sum(ref == c)) for c in range(k)}

    speakers = []
    if speaker_ids is not None:
        if utterance_ids is None:
            utterance_ids = [str(i) for i in range(len(ref))]
        speaker_ids = list(speaker_ids)
        spk_ref = {}
        for s, r in zip(speaker_ids, ref):
            spk_ref.setdefault(s, int(r))
        for sp in speaker_aggregate(utterance_ids, speaker_ids, scores):
            rows = [i for i, s in enumerate(speaker_ids) if s == sp.speaker_id]
            ref_bin = binarize_mildplus(spk_ref[sp.speaker_id]) if k == 5 else spk_ref[sp.speaker_id]
            speakers.append(
                {
                    "speaker_id": sp.speaker_id,
                    "predicted_class": sp.predicted_class,
                    "binarized_accuracy_pct": binarized_accuracy(scores[rows], ref_bin),
                }
            )

    slices = {}
    if slice_values is not None:
        slice_values = list(slice_values)
        for name in sorted({v for v in slice_values if v}):
            rows = [i for i, v in enumerate(slice_values) if v == name]
            sub_auc, sub_per_class = ovr_auc(scores[rows], ref[rows], k)
            slices[name] = EvalReport(
                task=k,
                n_utterances=len(rows),
                class_counts={c: int(np.sum(ref[rows] == c)) for c in range(k)},
                accuracy=accuracy(pred[rows], ref[rows]),
                macro_f1=macro_f1(pred[rows], ref[rows], k),
                mean_ovr_auc=sub_auc,
                per_class_auc=sub_per_class,
            )

    return EvalReport(
        task=k,
        n_utterances=len(ref),
        class_counts=counts,
        accuracy=accuracy(pred, ref),
        macro_f1=macro_f1(pred, ref, k),
        mean_ovr_auc=mean_auc,
        per_class_auc=per_class,
        speakers=speakers,
        slices=slices,
    )
