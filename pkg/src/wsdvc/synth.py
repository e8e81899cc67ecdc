"""Synthetic datasets with planted events.

Every event carries a distinct signature (a scaled basis vector added to
background noise) and a caption fixed per signature. The planted sentence
embedding of an event is its mean feature row, so identity embedding maps
align events and sentences exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import DatasetManifest, GTEvent, VideoRecord
from .proposals import TeacherOutput, oracle_teacher_output
from .temporal import Interval, even_split


class InfeasibleSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_videos: int = 4
    length: int = 100
    n_events: int = 3
    feature_dim: int = 16
    noise: float = 0.1
    signature_scale: float = 5.0
    min_event_len: int = 2
    max_event_len: int | None = None
    tiled: bool = False
    n_words: int = 20
    sentence_len: tuple[int, int] = (3, 6)
    sharpness: float = 0.0
    frame_duration: float = 1.0
    seed: int = 0


@dataclass
class SynthData:
    manifest: DatasetManifest
    features: dict[str, np.ndarray]
    teachers: dict[str, TeacherOutput]
    captions: dict[int, list[int]]


def _place_events(rng, T, n, min_len, max_len, tiled):
    if tiled:
        return [(int(iv.start), int(iv.end)) for iv in even_split(T, n)]
    max_len = max(min_len, min(max_len or T // n, T // n))
    lengths = rng.integers(min_len, max_len + 1, size=n)
    slack = T - int(lengths.sum())
    # random gaps: n + 1 non-negative parts summing to the slack
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, t = [], 0
    for gap, ln in zip(gaps, lengths):
        t += int(gap)
        spans.append((t, t + int(ln)))
        t += int(ln)
    return spans


def gen_synthetic(spec: SynthSpec) -> SynthData:
    if spec.n_events < 1 or spec.n_videos < 1:
        raise InfeasibleSpecError("need at least one video and one event per video")
    if spec.min_event_len < 2:
        raise InfeasibleSpecError("events must span at least 2 frames")
    if spec.n_events * spec.min_event_len > spec.length:
        raise InfeasibleSpecError(
            f"{spec.n_events} events of >= {spec.min_event_len} frames do not fit in {spec.length} frames")
    if spec.n_events > spec.feature_dim:
        raise InfeasibleSpecError("feature_dim must be >= events per video for distinct signatures")
    rng = np.random.default_rng(spec.seed)
    vocab = ["<bos>", "<eos>"] + [f"w{i}" for i in range(spec.n_words)]
    lo, hi = spec.sentence_len
    captions = {k: [int(t) for t in rng.integers(2, len(vocab), size=int(rng.integers(lo, hi + 1)))]
                for k in range(spec.feature_dim)}

    videos, features, teachers = [], {}, {}
    for v in range(spec.n_videos):
        vid = f"v{v:04d}"
        T = spec.length
        spans = _place_events(rng, T, spec.n_events, spec.min_event_len, spec.max_event_len, spec.tiled)
        sigs = rng.choice(spec.feature_dim, size=spec.n_events, replace=False)
        feats = rng.normal(0.0, spec.noise, (T, spec.feature_dim))
        events, embs = [], []
        for (s, e), k in zip(spans, sigs):
            feats[s:e, k] += spec.signature_scale
            events.append(GTEvent(s, e, list(captions[int(k)])))
        for s, e in spans:
            embs.append(feats[s:e].mean(axis=0).tolist())
        features[vid] = feats
        teachers[vid] = oracle_teacher_output([Interval(s, e) for s, e in spans], T, spec.sharpness)
        videos.append(VideoRecord(vid, f"features/{vid}.txt", T, events, embs))
    manifest = DatasetManifest(videos, vocab, spec.frame_duration, "teachers.jsonl").validate()
    return SynthData(manifest, features, teachers, captions)
