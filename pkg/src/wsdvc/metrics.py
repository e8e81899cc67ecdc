"""Proposal, retrieval and caption metrics."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .temporal import Interval, iou

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


def recall_at(proposals: Sequence, gt: Sequence[Interval], AN: int, iou_t: float) -> float:
    """Fraction of ``gt`` hit (IoU >= ``iou_t``) by one of the first ``AN`` ranked proposals."""
    if not 0 < iou_t <= 1:
        raise ValueError("IoU threshold must lie in (0, 1]")
    if not gt:
        return 1.0
    top = [getattr(p, "interval", p) for p in proposals[:AN]]
    hit = sum(1 for g in gt if any(iou(p, g) >= iou_t for p in top))
    return hit / len(gt)


def _iou_matrix(props: Sequence[Interval], gt: Sequence[Interval]) -> np.ndarray:
    if not props or not gt:
        return np.zeros((len(props), len(gt)))
    ps = np.array([[p.start, p.end] for p in props], dtype=np.float64)
    gs = np.array([[g.start, g.end] for g in gt], dtype=np.float64)
    inter = np.clip(np.minimum(ps[:, None, 1], gs[None, :, 1]) - np.maximum(ps[:, None, 0], gs[None, :, 0]), 0, None)
    union = (ps[:, 1] - ps[:, 0])[:, None] + (gs[:, 1] - gs[:, 0])[None, :] - inter
    return inter / union


def ar_at_an(videos: Sequence[tuple[Sequence, Sequence[Interval]]], A_max: int = 100,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> np.ndarray:
    """Average-recall curve; entry ``k`` is AR at ``AN = k + 1``.

    For each video recall is averaged over ``thresholds`` first, then the
    per-video values are averaged.
    """
    if not videos:
        raise ValueError("need at least one video")
    thr = np.asarray(thresholds, dtype=np.float64)
    curve = np.zeros(A_max)
    for props, gt in videos:
        if not gt:
            curve += 1.0
            continue
        ivs = [getattr(p, "interval", p) for p in props][:A_max]
        if ivs:
            # best IoU per GT among the first AN proposals
            best = np.maximum.accumulate(_iou_matrix(ivs, list(gt)), axis=0)
            best = best[np.minimum(np.arange(A_max), len(ivs) - 1)]
        else:
            best = np.zeros((A_max, len(gt)))
        hits = best[:, :, None] >= thr[None, None, :]
        curve += hits.mean(axis=(1, 2))
    return curve / len(videos)


def auc(curve) -> float:
    """Trapezoidal area under an AR curve over ``AN in [1, A_max]``, normalised by ``A_max - 1``."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < 2:
        raise ValueError("AUC needs a curve over at least two AN values")
    area = float(np.sum((curve[1:] + curve[:-1]) / 2.0))
    return area / (curve.size - 1)


def retrieval_metrics(sim, truth) -> tuple[float, int]:
    """R@1 and median rank; equal similarities rank the lower gallery index first."""
    sim = np.asarray(sim, dtype=np.float64)
    truth = np.asarray(truth, dtype=int)
    if sim.ndim != 2 or truth.shape != (sim.shape[0],) or sim.shape[0] == 0:
        raise ValueError("need one truth index per query row")
    if np.any(truth < 0) or np.any(truth >= sim.shape[1]):
        raise ValueError("truth index outside the gallery")
    q = np.arange(sim.shape[0])
    t = sim[q, truth][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ranks = 1 + np.sum(sim > t, axis=1) + np.sum((sim == t) & (cols < truth[:, None]), axis=1)
    r1 = float(np.mean(ranks == 1))
    mr = int(np.sort(ranks)[(len(ranks) - 1) // 2])
    return r1, mr


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _as_refs(ref):
    # a single sentence or a list of alternatives
    if ref and isinstance(ref[0], (list, tuple)):
        return [list(r) for r in ref]
    return [list(ref)]


def bleu_n(candidates: Sequence, references: Sequence, N: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..N and no smoothing.

    Each reference entry may be a single sentence or a list of sentences.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    if not 1 <= N <= 4:
        raise ValueError("BLEU order must be 1..4")
    match = np.zeros(N)
    total = np.zeros(N)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        refs = _as_refs(ref)
        c_len += len(cand)
        # closest reference length, shorter on ties
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, N + 1):
            cc = ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            match[n - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if np.any(match == 0):
        return 0.0
    log_p = np.mean(np.log(match / total))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


def cider(candidates: Sequence, references: Sequence, n: int = 4) -> float:
    """Corpus CIDEr: the mean of :func:`cider_per_item`."""
    return float(np.mean(cider_per_item(candidates, references, n)))


def cider_per_item(candidates: Sequence, references: Sequence, n: int = 4) -> list[float]:
    """Plain CIDEr per candidate (no length penalty or clipping), scaled by 10.

    ``references[i]`` is a list of reference sentences for ``candidates[i]``
    (a bare sentence is taken as a single reference). Document frequencies
    come from the references of the whole corpus.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference counts differ")
    if not candidates:
        raise ValueError("empty corpus")
    refs = [_as_refs(r) for r in references]
    if any(len(r) == 0 for r in refs):
        raise ValueError("every candidate needs at least one reference")
    df = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for k in range(1, n + 1):
                seen.update(ngrams(r, k))
        df.update(seen)
    log_n = math.log(float(len(candidates)))

    def vec(tokens):
        out = []
        for k in range(1, n + 1):
            counts = ngrams(tokens, k)
            out.append({g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()})
        return out

    def cos(a, b):
        dot = sum(v * b.get(g, 0.0) for g, v in a.items())
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        return dot / (na * nb) if na > 0 and nb > 0 else 0.0

    scores = []
    for cand, rs in zip(candidates, refs):
        cv = vec(list(cand))
        per_order = np.zeros(n)
        for r in rs:
            rv = vec(r)
            per_order += [cos(cv[k], rv[k]) for k in range(n)]
        per_order /= len(rs)
        scores.append(float(10.0 * per_order.mean()))
    return scores


def match_by_gate(pred: Sequence[Interval], gt: Sequence[Interval], gate: float = 0.5) -> list[int | None]:
    """For each GT interval, the index of its highest-IoU prediction at or above ``gate`` (None if none)."""
    out = []
    for g in gt:
        best, best_iou = None, -1.0
        for k, p in enumerate(pred):
            v = iou(p, g)
            if v >= gate and v > best_iou:
                best, best_iou = k, v
        out.append(best)
    return out


def caption_scores(videos, gate: float = 0.5) -> dict:
    """BLEU@1-4 and CIDEr over GT events paired with gated best-IoU predictions.

    ``videos`` yields ``(pred, gt)`` where both are lists of
    ``(Interval, tokens)``. Unmatched GT events contribute an empty candidate.
    """
    cands, refs = [], []
    for pred, gt in videos:
        idx = match_by_gate([p[0] for p in pred], [g[0] for g in gt], gate)
        for (g_iv, g_tok), k in zip(gt, idx):
            cands.append(list(pred[k][1]) if k is not None else [])
            refs.append(list(g_tok))
    if not cands:
        return {"bleu1": 0.0, "bleu2": 0.0, "bleu3": 0.0, "bleu4": 0.0, "cider": 0.0, "pairs": 0}
    report = {f"bleu{k}": bleu_n(cands, refs, k) for k in range(1, 5)}
    report["cider"] = cider(cands, [[r] for r in refs]) if len(cands) >= 2 else 0.0
    report["pairs"] = len(cands)
    return report
