"""Boundary-matching proposal decoding.

A :class:`TeacherOutput` holds per-frame start/end probabilities and a
duration x start confidence map. Row ``d - 1`` of the map scores the candidate
``[ts, ts + d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .temporal import Interval, iou


def valid_mask(T: int, D: int) -> np.ndarray:
    """Boolean (D, T) mask, true where ``ts + d <= T``."""
    d = np.arange(1, D + 1)[:, None]
    ts = np.arange(T)[None, :]
    return ts + d <= T


@dataclass
class TeacherOutput:
    p_start: np.ndarray
    p_end: np.ndarray
    conf: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.p_start = np.asarray(self.p_start, dtype=np.float64)
        self.p_end = np.asarray(self.p_end, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.p_start.ndim != 1 or self.p_start.shape != self.p_end.shape:
            raise ValueError("p_start and p_end must be vectors of equal length")
        T = self.p_start.shape[0]
        if T < 1:
            raise ValueError("empty boundary vectors")
        if self.conf.ndim != 2 or self.conf.shape[1] != T or not 1 <= self.conf.shape[0] <= T:
            raise ValueError(f"confidence map shape {self.conf.shape} inconsistent with T={T}")
        grid = valid_mask(T, self.conf.shape[0])
        if self.mask is None:
            self.mask = grid
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.conf.shape:
                raise ValueError("mask shape differs from confidence map shape")
            if np.any(self.mask & ~grid):
                raise ValueError("mask marks candidates that run past the sequence end")
        for name in ("p_start", "p_end", "conf"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def T(self) -> int:
        return self.p_start.shape[0]

    @property
    def D(self) -> int:
        return self.conf.shape[0]

    def check_probabilities(self) -> "TeacherOutput":
        """Raise unless every boundary probability and confidence lies in [0, 1]."""
        for name in ("p_start", "p_end", "conf"):
            arr = getattr(self, name)
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} has entries outside [0, 1]")
        return self

    def copy(self) -> "TeacherOutput":
        return TeacherOutput(self.p_start.copy(), self.p_end.copy(), self.conf.copy(), self.mask.copy())

    @classmethod
    def zeros(cls, T: int, D: int | None = None) -> "TeacherOutput":
        D = T if D is None else D
        return cls(np.zeros(T), np.zeros(T), np.zeros((D, T)))


@dataclass(frozen=True)
class ScoredProposal:
    interval: Interval
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score) or self.score < 0:
            raise ValueError(f"proposal score must be finite and >= 0, got {self.score}")

    @property
    def start(self):
        return self.interval.start

    @property
    def end(self):
        return self.interval.end


def _rank_key(p: ScoredProposal):
    return (-p.score, p.interval.start, p.interval.length)


def candidate_map(T: int, D: int) -> list[tuple[int, int]]:
    """All ``(ts, d)`` with ``ts + d <= T`` and ``1 <= d <= D``, ordered by start then duration."""
    if not 1 <= D <= T:
        raise ValueError(f"need 1 <= D <= T, got D={D}, T={T}")
    return [(ts, d) for ts in range(T) for d in range(1, min(D, T - ts) + 1)]


def score_map(out: TeacherOutput) -> np.ndarray:
    """(D, T) array of ``p_start(ts) * p_end(ts + d - 1) * conf(d, ts)``; zero off the mask."""
    T, D = out.T, out.D
    ends = np.arange(T)[None, :] + np.arange(D)[:, None]
    p_end = out.p_end[np.minimum(ends, T - 1)]
    scores = out.p_start[None, :] * p_end * out.conf
    return np.where(out.mask, scores, 0.0)


def score_proposals(out: TeacherOutput) -> list[ScoredProposal]:
    out.check_probabilities()
    scores = score_map(out)
    props = []
    for ts, d in candidate_map(out.T, out.D):
        if out.mask[d - 1, ts]:
            props.append(ScoredProposal(Interval(ts, ts + d), float(scores[d - 1, ts])))
    return props


def soft_nms(proposals: list[ScoredProposal], sigma: float = 0.5,
             limit: int | None = None) -> list[ScoredProposal]:
    """Gaussian soft-NMS.

    Repeatedly takes the best remaining proposal and multiplies every other
    remaining score by ``exp(-iou**2 / sigma)``. Output is in selection order,
    which is descending in the decayed scores. ``limit`` stops after that many
    selections; the prefix is identical to the full run.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    n = len(proposals)
    if n == 0:
        return []
    starts = np.array([p.interval.start for p in proposals], dtype=np.float64)
    ends = np.array([p.interval.end for p in proposals], dtype=np.float64)
    scores = np.array([p.score for p in proposals], dtype=np.float64)
    lengths = ends - starts
    # ordering for ties: earlier start, then shorter
    tie_rank = np.empty(n, dtype=np.int64)
    tie_rank[np.lexsort((lengths, starts))] = np.arange(n)

    alive = np.ones(n, dtype=bool)
    out = []
    limit = n if limit is None else min(limit, n)
    while len(out) < limit:
        cand = np.flatnonzero(alive)
        best_score = scores[cand].max()
        tied = cand[scores[cand] == best_score]
        i = tied[np.argmin(tie_rank[tied])]
        alive[i] = False
        out.append(ScoredProposal(proposals[i].interval, float(scores[i])))
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        inter = np.minimum(ends[rest], ends[i]) - np.maximum(starts[rest], starts[i])
        inter = np.clip(inter, 0.0, None)
        union = lengths[rest] + lengths[i] - inter
        ov = inter / union
        scores[rest] *= np.exp(-(ov * ov) / sigma)
    return out


def top_k(proposals: list[ScoredProposal], K: int = 100) -> list[ScoredProposal]:
    if K < 1:
        raise ValueError("K must be >= 1")
    return sorted(proposals, key=_rank_key)[:K]


def _bumps(centers, T: int, sharpness: float) -> np.ndarray:
    t = np.arange(T, dtype=np.float64)
    p = np.zeros(T)
    for c in centers:
        if sharpness <= 0:
            bump = (t == c).astype(np.float64)
        else:
            bump = np.exp(-((t - c) ** 2) / (2.0 * sharpness ** 2))
        p = np.maximum(p, bump)
    return p


def iou_map(intervals: list[Interval], T: int, D: int) -> np.ndarray:
    """(D, T) map of each candidate's best IoU against ``intervals`` (zero off the grid)."""
    conf = np.zeros((D, T))
    if not intervals:
        return conf
    ts = np.arange(T, dtype=np.float64)[None, :]
    te = ts + np.arange(1, D + 1, dtype=np.float64)[:, None]
    for g in intervals:
        inter = np.clip(np.minimum(te, g.end) - np.maximum(ts, g.start), 0.0, None)
        union = (te - ts) + (g.end - g.start) - inter
        conf = np.maximum(conf, inter / union)
    return np.where(valid_mask(T, D), conf, 0.0)


def _check_within(intervals: list[Interval], T: int):
    for g in intervals:
        if g.end > T:
            raise ValueError(f"interval [{g.start}, {g.end}) exceeds sequence length {T}")


def oracle_teacher_output(gt: list[Interval], T: int, sharpness: float = 0.0,
                          D: int | None = None, shift: float = 0.0) -> TeacherOutput:
    """Synthetic teacher: Gaussian bumps at GT boundaries and an IoU confidence map.

    ``sharpness`` is the bump standard deviation in frames (0 gives one-hot
    boundaries). ``shift`` displaces every bump and the confidence map's
    reference intervals by that many frames, modelling a biased teacher.
    """
    D = T if D is None else D
    _check_within(gt, T)
    p_start = _bumps([g.start + shift for g in gt], T, sharpness)
    p_end = _bumps([g.end - 1 + shift for g in gt], T, sharpness)
    ref = []
    for g in gt:
        s, e = max(g.start + shift, 0), min(g.end + shift, T)
        if e > s:
            ref.append(Interval(s, e))
    return TeacherOutput(p_start, p_end, iou_map(ref, T, D))


def decode(out: TeacherOutput, K: int = 100, sigma: float = 0.5) -> list[ScoredProposal]:
    """Score every candidate, apply soft-NMS and keep the top ``K``."""
    return top_k(soft_nms(score_proposals(out), sigma, limit=K), K)
