"""Pipeline stages and the run-directory orchestrator.

A run directory holds every artifact of one run; each file is written once::

    manifest.jsonl  features/<id>.txt  teachers.jsonl      (gen-synth)
    proposals.json                                         (propose)
    params.json  match_trace.json  matches.jsonl           (match)
    results.json                                           (caption)
    metrics.json                                           (eval)
    distill.json                                           (distill-demo)
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .captioning import EOS, beam_search
from .distillation import (GatingParams, boundary_bce, distill_objective, fit_student,
                           fuse_labels, pairs_to_hard_labels)
from .matching import (EmbedParams, MatchVideo, assign_proposals, embed_clip, embed_sentence,
                       train_matcher)
from .metrics import IOU_THRESHOLDS, ar_at_an, auc, caption_scores, retrieval_metrics
from .proposals import ScoredProposal, TeacherOutput, decode, oracle_teacher_output
from .synth import SynthSpec, gen_synthetic
from .temporal import Interval, rescale_features

log = logging.getLogger(__name__)

MODES = ("propose", "train-match", "caption", "eval", "distill-demo")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    K: int = 100
    gamma: float = 0.8
    eta: float = 0.2
    margin: float = 0.2
    beam: int = 5
    target_len: int = 100
    iou_thresholds: tuple = IOU_THRESHOLDS
    nms_sigma: float = 0.5
    seed: int = 0
    caption_gate: float = 0.5
    max_caption_len: int = 20
    match_steps: int = 300
    match_lr: float = 0.05
    refine_iterations: int = 1

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        if self.gamma < 0 or self.eta < 0:
            raise ValueError("gamma and eta must be non-negative")
        if self.K < 1 or self.beam < 1 or self.target_len < 1:
            raise ValueError("K, beam and target_len must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d


@dataclass
class Run:
    """Lazily loaded view of a run directory."""
    root: Path
    manifest_path: Path | None = None
    _manifest: io.DatasetManifest | None = field(default=None, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.manifest_path is None:
            self.manifest_path = self.root / "manifest.jsonl"

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def manifest(self) -> io.DatasetManifest:
        if self._manifest is None:
            if not self.manifest_path.exists():
                raise FileNotFoundError(f"manifest not found: {self.manifest_path}")
            self._manifest = io.load_manifest(self.manifest_path)
        return self._manifest

    def features(self, vid: str) -> np.ndarray:
        rec = self.manifest.video(vid)
        feats = io.load_features(self.manifest_path.parent / rec.feature_path)
        if feats.shape[0] != rec.length:
            raise ValueError(f"video {vid}: feature rows {feats.shape[0]} != manifest length {rec.length}")
        return feats

    def teachers(self) -> dict[str, list[TeacherOutput]]:
        name = self.manifest.teacher_outputs
        if name is None:
            raise FileNotFoundError("manifest names no teacher outputs")
        return io.teachers_from_text((self.manifest_path.parent / name).read_text(encoding="utf-8"))

    def proposals(self) -> dict[str, list[ScoredProposal]]:
        return io.proposals_from_text(self.path("proposals.json").read_text(encoding="utf-8"))

    def params(self) -> EmbedParams | None:
        p = self.path("params.json")
        if not p.exists():
            return None
        return EmbedParams(*io.params_from_text(p.read_text(encoding="utf-8")))


# ---- stages ------------------------------------------------------------------

def write_synthetic(out: Path, spec: SynthSpec) -> io.DatasetManifest:
    data = gen_synthetic(spec)
    out = Path(out)
    for vid, feats in data.features.items():
        io.write_once(out / "features" / f"{vid}.txt", io.features_to_text(feats))
    io.write_once(out / "teachers.jsonl", io.teachers_to_text((v, 0, t) for v, t in data.teachers.items()))
    io.write_once(out / "manifest.jsonl", io.manifest_to_text(data.manifest))
    return data.manifest


def propose(manifest: io.DatasetManifest, teachers: dict[str, list[TeacherOutput]],
            cfg: PipelineConfig) -> dict[str, list[ScoredProposal]]:
    """Decode each video's (uniformly fused) teacher outputs into at most K proposals in video frames."""
    out = {}
    for v in manifest.videos:
        outs = teachers.get(v.id)
        if not outs:
            raise StageError("propose", f"no teacher output for video {v.id}")
        fused = outs[0] if len(outs) == 1 else fuse_labels(np.full(len(outs), 1.0 / len(outs)), outs)
        props = decode(fused, cfg.K, cfg.nms_sigma)
        ratio = v.length / fused.T
        if ratio != 1:
            props = [ScoredProposal(Interval(p.start * ratio, p.end * ratio), p.score) for p in props]
        out[v.id] = props
    return out


def _usable(props: list[ScoredProposal]) -> list[ScoredProposal]:
    pos = [p for p in props if p.score > 0]
    return pos or props


def train_match(run: Run, proposals: dict[str, list[ScoredProposal]], cfg: PipelineConfig):
    """Train the embedding maps on even-split correspondences, then assign a proposal to every sentence."""
    m = run.manifest
    videos, ids = [], []
    for v in m.videos:
        if not v.sentence_embeddings:
            continue
        videos.append(MatchVideo(run.features(v.id), np.asarray(v.sentence_embeddings)))
        ids.append(v.id)
    if not videos:
        raise StageError("train-match", "no video carries sentence embeddings")
    params, trace = train_matcher(videos, steps=cfg.match_steps, lr=cfg.match_lr, h=cfg.margin, seed=cfg.seed)
    records = []
    for vid, mv in zip(ids, videos):
        props = proposals.get(vid)
        if not props:
            raise StageError("train-match", f"no proposals for video {vid}")
        sents = np.stack([embed_sentence(s, params) for s in mv.sentences])
        for pair in assign_proposals(_usable(props), mv.feats, sents, params):
            records.append(io.MatchRecord(vid, pair.sentence_index, pair.proposal.start, pair.proposal.end,
                                          pair.proposal.score, pair.similarity))
    return params, trace, records


def caption(run: Run, proposals: dict[str, list[ScoredProposal]], model, cfg: PipelineConfig,
            params: EmbedParams | None = None) -> io.DenseCaptionResult:
    m = run.manifest
    result = io.DenseCaptionResult()
    for v in m.videos:
        feats = run.features(v.id)
        p = params or EmbedParams.identity(feats.shape[1])
        entries = []
        for prop in proposals.get(v.id, []):
            ctx = embed_clip(feats, prop.interval, p)
            toks = beam_search(model, ctx, cfg.beam, cfg.max_caption_len)
            spf = m.frame_duration
            entries.append(io.CaptionEntry((prop.start * spf, prop.end * spf),
                                           io.tokens_to_sentence(toks, m.vocab, EOS), prop.score))
        result.results[v.id] = entries
    return result


def gt_result(manifest: io.DatasetManifest) -> io.DenseCaptionResult:
    """The ground truth expressed as a dense-caption result (score 1 for every event)."""
    res = io.DenseCaptionResult()
    for v in manifest.videos:
        spf = manifest.frame_duration
        res.results[v.id] = [io.CaptionEntry((e.start * spf, e.end * spf),
                                             io.tokens_to_sentence(e.tokens, manifest.vocab), 1.0)
                             for e in v.gt_events or []]
    return res


def evaluate(run: Run, cfg: PipelineConfig, proposals: dict[str, list[ScoredProposal]] | None = None,
             result: io.DenseCaptionResult | None = None, params: EmbedParams | None = None) -> dict:
    m = run.manifest
    spf = m.frame_duration
    gt = {v.id: [Interval(e.start * spf, e.end * spf) for e in v.gt_events or []] for v in m.videos}
    report: dict = {"config": cfg.to_dict()}
    if proposals is not None:
        ranked = {vid: [Interval(p.start * spf, p.end * spf) for p in props] for vid, props in proposals.items()}
        source = "proposals"
    elif result is not None:
        ranked = {vid: [Interval(*e.timestamp) for e in sorted(ents, key=lambda e: -e.score)]
                  for vid, ents in result.results.items()}
        source = "results"
    else:
        ranked = None
    if ranked is not None:
        curve = ar_at_an([(ranked.get(vid, []), g) for vid, g in gt.items()], cfg.K, cfg.iou_thresholds)
        report["proposal"] = {
            "source": source,
            "AR@1": float(curve[0]),
            "AR@10": float(curve[min(9, cfg.K - 1)]),
            f"AR@{cfg.K}": float(curve[-1]),
            "AUC": auc(curve) if cfg.K >= 2 else None,
            "curve": curve.tolist(),
        }
    if result is not None:
        pairs = []
        for v in m.videos:
            pred = [(Interval(*e.timestamp), io.sentence_to_tokens(e.sentence, m.vocab))
                    for e in result.results.get(v.id, [])]
            ref = [(Interval(e.start * spf, e.end * spf), e.tokens) for e in v.gt_events or []]
            pairs.append((pred, ref))
        report["caption"] = caption_scores(pairs, cfg.caption_gate)
    queries, gallery = [], []
    for v in m.videos:
        if not v.sentence_embeddings or not v.gt_events:
            continue
        feats = run.features(v.id)
        p = params or EmbedParams.identity(feats.shape[1], len(v.sentence_embeddings[0]))
        for e, s in zip(v.gt_events, v.sentence_embeddings):
            gallery.append(embed_clip(feats, e.interval, p))
            queries.append(embed_sentence(s, p))
    if queries:
        sim = np.stack(queries) @ np.stack(gallery).T
        r1, mr = retrieval_metrics(sim, np.arange(len(queries)))
        report["retrieval"] = {"R@1": r1, "MedianRank": mr, "queries": len(queries)}
    return report


def _grid_interval(start: float, end: float, T: int, L: int) -> Interval:
    """Map a frame interval of a length-T video onto a length-L grid, keeping it non-empty."""
    s = int(round(start * L / T))
    t = max(int(round(end * L / T)), s + 1)
    return Interval(min(s, L - 1), min(t, L))


def distill_demo(run: Run, cfg: PipelineConfig) -> dict:
    """Three synthetic teachers (sharp, +2-frame biased, blurred) distilled into free student outputs.

    Features are rescaled to ``cfg.target_len``. The soft-label-only student
    is compared against one refined with hard labels from matched pairs
    (``matches.jsonl`` if present, otherwise the GT events).
    """
    m = run.manifest
    L = cfg.target_len
    rng = np.random.default_rng(cfg.seed)
    match_path = run.path("matches.jsonl")
    matches = io.matches_from_text(match_path.read_text(encoding="utf-8")) if match_path.exists() else None
    videos, soft_ar, hard_ar = [], [], []
    gating = None
    for v in m.videos:
        if not v.gt_events:
            continue
        Vs = rescale_features(run.features(v.id), L)
        if gating is None:
            gating = GatingParams.random(Vs.shape[1], rng)
        gt = [_grid_interval(e.start, e.end, v.length, L) for e in v.gt_events]
        teachers = [oracle_teacher_output(gt, L, 1.0),
                    oracle_teacher_output(gt, L, 1.0, shift=2.0),
                    oracle_teacher_output(gt, L, 3.0)]
        tfeats = [Vs + rng.normal(0.0, 0.05 * (k + 1), Vs.shape) for k in range(3)]
        init = TeacherOutput(np.full(L, 0.5), np.full(L, 0.5), np.full((L, L), 0.5))
        terms = distill_objective(init, Vs, teachers, tfeats, gating, cfg.gamma, cfg.eta)
        target = fuse_labels(terms.g, teachers)
        if matches is not None:
            pairs = [_grid_interval(r.start, r.end, v.length, L) for r in matches if r.video == v.id]
            hard_source = "matches"
        else:
            pairs, hard_source = gt, "gt"
        hard = pairs_to_hard_labels(pairs, L)
        gt_labels = pairs_to_hard_labels(gt, L)
        soft, _ = fit_student(init, target, steps=400, lr_boundary=0.05 * L)
        refined = soft
        for _ in range(cfg.refine_iterations):
            refined, _ = fit_student(refined, target, steps=400, lr_boundary=0.05 * L, hard=hard)
        scale = v.length / L
        dec_soft = [Interval(p.start * scale, p.end * scale) for p in decode(soft, cfg.K, cfg.nms_sigma)]
        dec_hard = [Interval(p.start * scale, p.end * scale) for p in decode(refined, cfg.K, cfg.nms_sigma)]
        gt_frames = [e.interval for e in v.gt_events]
        soft_ar.append((dec_soft, gt_frames))
        hard_ar.append((dec_hard, gt_frames))
        videos.append({
            "video": v.id,
            "teacher_logits": terms.q.tolist(),
            "teacher_weights": terms.g.tolist(),
            "suppression_weights": terms.g_bar.tolist(),
            "Lp": terms.Lp, "Lp_bar": terms.Lp_bar, "L_final": terms.total,
            "boundary_bce_soft": boundary_bce(soft, gt_labels),
            "boundary_bce_refined": boundary_bce(refined, gt_labels),
            "hard_label_source": hard_source,
        })
    if not videos:
        raise StageError("distill-demo", "no video has GT events to build teachers from")
    c_soft = ar_at_an(soft_ar, cfg.K, cfg.iou_thresholds)
    c_hard = ar_at_an(hard_ar, cfg.K, cfg.iou_thresholds)
    return {"videos": videos,
            "soft": {"AR@10": float(c_soft[min(9, cfg.K - 1)]), "AUC": auc(c_soft) if cfg.K >= 2 else None},
            "refined": {"AR@10": float(c_hard[min(9, cfg.K - 1)]), "AUC": auc(c_hard) if cfg.K >= 2 else None}}


# ---- orchestrator --------------------------------------------------------------

def _json(obj) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def run_pipeline(run_dir, cfg: PipelineConfig, mode: str, manifest_path=None, model_path=None):
    """Run one stage against a run directory and write its artifact there."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    run = Run(Path(run_dir), Path(manifest_path) if manifest_path else None)
    try:
        run.manifest
    except (FileNotFoundError, ValueError) as exc:
        raise StageError(mode, f"cannot load manifest: {exc}") from exc

    if mode == "propose":
        try:
            teachers = run.teachers()
        except FileNotFoundError as exc:
            raise StageError(mode, f"missing teacher outputs: {exc}") from exc
        props = propose(run.manifest, teachers, cfg)
        spf = {v.id: run.manifest.frame_duration for v in run.manifest.videos}
        io.write_once(run.path("proposals.json"), io.proposals_to_text(props, spf))
        return props

    if mode == "train-match":
        props = _require_proposals(run, mode)
        params, trace, records = train_match(run, props, cfg)
        io.write_once(run.path("params.json"), io.params_to_text(params.P_visual, params.P_lexical))
        io.write_once(run.path("match_trace.json"), _json(trace))
        io.write_once(run.path("matches.jsonl"), io.matches_to_text(records))
        return records

    if mode == "caption":
        props = _require_proposals(run, mode)
        if model_path is None:
            raise StageError(mode, "no caption model given (--model)")
        try:
            model = io.tabular_model_from_text(Path(model_path).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            raise StageError(mode, f"cannot load caption model: {exc}") from exc
        result = caption(run, props, model, cfg, run.params())
        io.write_once(run.path("results.json"), result.to_text())
        return result

    if mode == "eval":
        props = run.proposals() if run.path("proposals.json").exists() else None
        res_path = run.path("results.json")
        result = io.DenseCaptionResult.from_text(res_path.read_text(encoding="utf-8")) if res_path.exists() else None
        if props is None and result is None:
            raise StageError(mode, "nothing to evaluate: no proposals.json or results.json in the run directory")
        report = evaluate(run, cfg, props, result, run.params())
        io.write_once(run.path("metrics.json"), _json(report))
        return report

    report = distill_demo(run, cfg)
    io.write_once(run.path("distill.json"), _json(report))
    return report


def _require_proposals(run: Run, stage: str):
    if not run.path("proposals.json").exists():
        raise StageError(stage, "proposals.json not found; run the propose stage first")
    return run.proposals()
