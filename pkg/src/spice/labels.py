"""Intelligibility label space and class-score helpers."""

from __future__ import annotations

import enum

import numpy as np


class IntelligibilityClass(enum.IntEnum):
    """Five-point intelligibility rating, ordered by increasing severity."""

    TYPICAL = 0
    MILD = 1
    MODERATE = 2
    SEVERE = 3
    PROFOUND = 4


N_CLASSES = len(IntelligibilityClass)

LABEL_NAMES = {c.name: c for c in IntelligibilityClass}


def parse_label(text: str) -> IntelligibilityClass:
    try:
        return LABEL_NAMES[text.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown intelligibility label {text!r}") from None


def validate_class_scores(probs: np.ndarray, k: int | None = None) -> np.ndarray:
    """Check a score vector: entries in [0, 1], summing to 1 within 1e-6."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"class scores must be a vector, got shape {probs.shape}")
    if k is not None and probs.shape[0] != k:
        raise ValueError(f"expected {k} class scores, got {probs.shape[0]}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("class scores contain non-finite entries")
    if np.any(probs < -1e-12) or np.any(probs > 1 + 1e-12):
        raise ValueError("class scores outside [0, 1]")
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ValueError(f"class scores sum to {probs.sum():.8f}, not 1")
    return probs


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-shifted)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
