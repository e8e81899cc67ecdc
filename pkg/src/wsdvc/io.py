"""File formats.

Everything is text. Manifests, teacher outputs and match pairs are JSON
Lines (one record per line, the first manifest line is a header). Feature
matrices are whitespace-separated rows preceded by a ``# shape T d`` header.
Dense-caption results follow the densevid_eval JSON layout. Floats are
written with round-trip precision, so parse(serialize(x)) == x.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .proposals import ScoredProposal, TeacherOutput
from .temporal import Interval

MANIFEST_FORMAT = "wsdvc-manifest/1"
TEACHER_FORMAT = "wsdvc-teacher/1"
RESULT_VERSION = "VERSION 1.0"


@dataclass
class GTEvent:
    start: int
    end: int
    tokens: list[int]

    @property
    def interval(self) -> Interval:
        return Interval(self.start, self.end)


@dataclass
class VideoRecord:
    id: str
    feature_path: str
    length: int
    gt_events: list[GTEvent] | None = None
    sentence_embeddings: list[list[float]] | None = None


@dataclass
class DatasetManifest:
    videos: list[VideoRecord]
    vocab: list[str]
    frame_duration: float = 1.0
    teacher_outputs: str | None = None

    def validate(self) -> "DatasetManifest":
        ids = [v.id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ValueError("video ids must be unique")
        if self.frame_duration <= 0:
            raise ValueError("frame_duration must be > 0")
        for v in self.videos:
            if v.length < 1:
                raise ValueError(f"video {v.id}: length must be >= 1")
            for ev in v.gt_events or []:
                if not 0 <= ev.start < ev.end <= v.length:
                    raise ValueError(f"video {v.id}: event [{ev.start}, {ev.end}) outside [0, {v.length})")
                if any(t < 0 or t >= len(self.vocab) for t in ev.tokens):
                    raise ValueError(f"video {v.id}: token id outside the vocabulary")
        return self

    def video(self, vid: str) -> VideoRecord:
        for v in self.videos:
            if v.id == vid:
                return v
        raise KeyError(vid)


def write_once(path: Path, text: str) -> Path:
    """Create ``path`` with ``text``; refuse to overwrite an existing artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


# ---- manifests -------------------------------------------------------------

def manifest_to_text(m: DatasetManifest) -> str:
    header = {"format": MANIFEST_FORMAT, "vocab": m.vocab, "frame_duration": m.frame_duration,
              "teacher_outputs": m.teacher_outputs}
    lines = [_dumps(header)]
    for v in m.videos:
        rec = {"id": v.id, "feature_path": v.feature_path, "length": v.length}
        if v.gt_events is not None:
            rec["gt_events"] = [{"start": e.start, "end": e.end, "tokens": e.tokens} for e in v.gt_events]
        if v.sentence_embeddings is not None:
            rec["sentence_embeddings"] = v.sentence_embeddings
        lines.append(_dumps(rec))
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str) -> DatasetManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a manifest (format {header.get('format')!r})")
    videos = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        events = rec.get("gt_events")
        if events is not None:
            events = [GTEvent(e["start"], e["end"], list(e["tokens"])) for e in events]
        videos.append(VideoRecord(rec["id"], rec["feature_path"], rec["length"], events,
                                  rec.get("sentence_embeddings")))
    return DatasetManifest(videos, list(header["vocab"]), header.get("frame_duration", 1.0),
                           header.get("teacher_outputs")).validate()


def load_manifest(path) -> DatasetManifest:
    return manifest_from_text(Path(path).read_text(encoding="utf-8"))


# ---- feature matrices ------------------------------------------------------

def features_to_text(arr) -> str:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    rows = [" ".join(repr(float(x)) for x in row) for row in arr]
    return f"# shape {arr.shape[0]} {arr.shape[1]}\n" + "\n".join(rows) + "\n"


def features_from_text(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# shape"):
        raise ValueError("feature file lacks a '# shape T d' header")
    T, d = (int(x) for x in lines[0].split()[2:4])
    data = np.array([[float(x) for x in ln.split()] for ln in lines[1:] if ln.strip()], dtype=np.float64)
    if data.shape != (T, d):
        raise ValueError(f"feature data shape {data.shape} disagrees with header ({T}, {d})")
    return data


def load_features(path) -> np.ndarray:
    return features_from_text(Path(path).read_text(encoding="utf-8"))


# ---- teacher outputs -------------------------------------------------------

def teacher_record(video: str, out: TeacherOutput, teacher: int = 0) -> dict:
    return {"format": TEACHER_FORMAT, "video": video, "teacher": teacher, "T": out.T, "D": out.D,
            "p_start": out.p_start.tolist(), "p_end": out.p_end.tolist(),
            "conf": out.conf.tolist(), "mask": out.mask.astype(int).tolist()}


def teacher_from_record(rec: dict) -> tuple[str, int, TeacherOutput]:
    if rec.get("format") != TEACHER_FORMAT:
        raise ValueError("not a teacher-output record")
    out = TeacherOutput(rec["p_start"], rec["p_end"], rec["conf"], np.array(rec["mask"], dtype=bool))
    if out.T != rec["T"] or out.D != rec["D"]:
        raise ValueError("teacher record shape fields disagree with its arrays")
    return rec["video"], rec.get("teacher", 0), out


def teachers_to_text(items) -> str:
    """``items`` yields ``(video_id, teacher_index, TeacherOutput)``."""
    return "".join(_dumps(teacher_record(v, o, k)) + "\n" for v, k, o in items)


def teachers_from_text(text: str) -> dict[str, list[TeacherOutput]]:
    out: dict[str, list[tuple[int, TeacherOutput]]] = {}
    for ln in text.splitlines():
        if ln.strip():
            vid, k, o = teacher_from_record(json.loads(ln))
            out.setdefault(vid, []).append((k, o))
    return {vid: [o for _, o in sorted(items, key=lambda x: x[0])] for vid, items in out.items()}


# ---- proposals, match pairs, results ---------------------------------------

def proposals_to_text(per_video: dict[str, list[ScoredProposal]], seconds_per_frame: dict[str, float]) -> str:
    results = {}
    for vid, props in per_video.items():
        spf = seconds_per_frame[vid]
        results[vid] = [{"frames": [p.start, p.end], "segment": [p.start * spf, p.end * spf],
                         "score": p.score} for p in props]
    return json.dumps({"version": "wsdvc-proposals/1", "results": results}, indent=1, allow_nan=False) + "\n"


def proposals_from_text(text: str) -> dict[str, list[ScoredProposal]]:
    data = json.loads(text)
    return {vid: [ScoredProposal(Interval(*p["frames"]), p["score"]) for p in props]
            for vid, props in data["results"].items()}


@dataclass
class MatchRecord:
    video: str
    sentence_index: int
    start: float
    end: float
    score: float
    similarity: float


def matches_to_text(records: list[MatchRecord]) -> str:
    return "".join(_dumps(r.__dict__) + "\n" for r in records)


def matches_from_text(text: str) -> list[MatchRecord]:
    return [MatchRecord(**json.loads(ln)) for ln in text.splitlines() if ln.strip()]


@dataclass
class CaptionEntry:
    timestamp: tuple[float, float]
    sentence: str
    score: float = 0.0


@dataclass
class DenseCaptionResult:
    results: dict[str, list[CaptionEntry]] = field(default_factory=dict)

    def to_text(self) -> str:
        res = {vid: [{"timestamp": list(e.timestamp), "sentence": e.sentence, "score": e.score} for e in ents]
               for vid, ents in self.results.items()}
        doc = {"version": RESULT_VERSION, "results": res,
               "external_data": {"used": False, "details": "synthetic features only"}}
        return json.dumps(doc, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DenseCaptionResult":
        data = json.loads(text)
        results = {}
        for vid, ents in data["results"].items():
            entries = []
            for e in ents:
                s, t = e["timestamp"]
                if not 0 <= s < t:
                    raise ValueError(f"video {vid}: invalid timestamp {e['timestamp']}")
                entries.append(CaptionEntry((s, t), e["sentence"], e.get("score", 0.0)))
            results[vid] = entries
        return cls(results)


def params_to_text(P_visual, P_lexical) -> str:
    return json.dumps({"P_visual": np.asarray(P_visual).tolist(), "P_lexical": np.asarray(P_lexical).tolist()}) + "\n"


def params_from_text(text: str):
    data = json.loads(text)
    return np.array(data["P_visual"], dtype=np.float64), np.array(data["P_lexical"], dtype=np.float64)


def tokens_to_sentence(tokens, vocab: list[str], eos: int = 1) -> str:
    return " ".join(vocab[t] for t in tokens if t != eos)


def sentence_to_tokens(sentence: str, vocab: list[str]) -> list[int]:
    index = {w: i for i, w in enumerate(vocab)}
    try:
        return [index[w] for w in sentence.split()]
    except KeyError as exc:
        raise ValueError(f"word {exc.args[0]!r} not in the vocabulary") from None


def tabular_model_from_text(text: str):
    """Parse ``{"vocab_size": V, "table": [{"prefix": [...], "probs": [...]}, ...]}``."""
    from .captioning import TabularModel
    data = json.loads(text)
    table = {tuple(row["prefix"]): row["probs"] for row in data.get("table", [])}
    return TabularModel(table, int(data["vocab_size"]))


def tabular_model_to_text(table: dict, vocab_size: int) -> str:
    rows = [{"prefix": list(k), "probs": list(map(float, v))} for k, v in table.items()]
    return json.dumps({"vocab_size": vocab_size, "table": rows}) + "\n"
