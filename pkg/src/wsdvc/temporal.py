"""Interval arithmetic, feature resampling and even video splitting.

Intervals are half-open ``[start, end)`` in frame units. Feature sequences are
plain ``(T, d)`` float arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientLengthError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        if not (np.isfinite(self.start) and np.isfinite(self.end)):
            raise ValueError(f"non-finite interval bounds ({self.start}, {self.end})")
        if self.start < 0:
            raise ValueError(f"interval start must be >= 0, got {self.start}")
        if self.end <= self.start:
            raise ValueError(f"interval end must exceed start, got [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


def iou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def check_features(seq) -> np.ndarray:
    """Return ``seq`` as a float (T, d) array, rejecting bad shapes and non-finite data."""
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"feature sequence must be a non-empty (T, d) matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature sequence contains non-finite values")
    return arr


def rescale_features(seq, target_len: int) -> np.ndarray:
    """Linearly interpolate a (T, d) sequence to ``target_len`` rows.

    Output row ``k`` samples the input at position ``k * (T - 1) / (target_len - 1)``.
    """
    arr = check_features(seq)
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    T = arr.shape[0]
    if T == target_len:
        return arr.copy()
    if T == 1:
        return np.repeat(arr, target_len, axis=0)
    pos = np.linspace(0.0, T - 1, target_len)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    return (1.0 - frac) * arr[lo] + frac * arr[hi]


def even_split(T: int, n: int) -> list[Interval]:
    """Partition ``[0, T)`` into ``n`` contiguous intervals with round-half-up cuts."""
    if n < 1:
        raise ValueError("part count must be >= 1")
    if T < n:
        raise InsufficientLengthError(f"cannot split length {T} into {n} non-empty parts")
    # floor(i*T/n + 1/2) in exact integer arithmetic
    cuts = [(2 * i * T + n) // (2 * n) for i in range(n + 1)]
    return [Interval(cuts[i], cuts[i + 1]) for i in range(n)]
