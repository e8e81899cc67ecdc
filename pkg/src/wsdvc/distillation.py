"""Multi-teacher distillation losses with analytic gradients.

The student is trained towards a weighted fusion of teacher soft labels plus a
weighted feature-matching term. Teacher weights come from a small gating
network over elementwise student/teacher feature products; suppression
weights ``1 / (n * g_i)`` give the counter-balancing objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .proposals import TeacherOutput, iou_map
from .temporal import check_features

BCE_EPS = 1e-7
WEIGHT_EPS = 1e-12


class DegenerateWeightError(ValueError):
    pass


@dataclass
class OutputGrad:
    """Gradient of a scalar loss with respect to the fields of a TeacherOutput."""
    p_start: np.ndarray
    p_end: np.ndarray
    conf: np.ndarray

    def __add__(self, other: "OutputGrad") -> "OutputGrad":
        return OutputGrad(self.p_start + other.p_start, self.p_end + other.p_end, self.conf + other.conf)

    def scale(self, c: float) -> "OutputGrad":
        return OutputGrad(c * self.p_start, c * self.p_end, c * self.conf)


@dataclass
class GatingParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: float

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, scale: float | None = None) -> "GatingParams":
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        return cls(rng.normal(0, scale, (d, d)), np.zeros(d),
                   rng.normal(0, scale, (d, d)), np.zeros(d),
                   rng.normal(0, scale, d), 0.0)

    @classmethod
    def identity(cls, d: int) -> "GatingParams":
        return cls(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d), np.ones(d), 0.0)


def compatibility_score(Vi, Vs, params: GatingParams) -> float:
    """Gating logit of one teacher: ``FC(relu(FC(maxpool_t(relu(FC(Vi * Vs))))))``."""
    Vi, Vs = check_features(Vi), check_features(Vs)
    if Vi.shape != Vs.shape:
        raise ValueError(f"teacher features {Vi.shape} and student features {Vs.shape} differ")
    if params.W1.shape != (Vi.shape[1], Vi.shape[1]):
        raise ValueError("gating parameters do not match the feature dimension")
    h1 = np.maximum((Vi * Vs) @ params.W1.T + params.b1, 0.0)
    pooled = h1.max(axis=0)
    h2 = np.maximum(params.W2 @ pooled + params.b2, 0.0)
    return float(params.w3 @ h2 + params.b3)


def teacher_weights(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size < 1:
        raise ValueError("need a non-empty vector of teacher logits")
    if not np.all(np.isfinite(q)):
        raise ValueError("teacher logits must be finite")
    e = np.exp(q - q.max())
    return e / e.sum()


def suppression_weights(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if np.any(g <= WEIGHT_EPS):
        raise DegenerateWeightError(f"teacher weight at or below {WEIGHT_EPS}: {g.min()}")
    return 1.0 / (g.size * g)


def fuse_labels(weights, outputs: list[TeacherOutput]) -> TeacherOutput:
    """Weighted sum of teacher outputs. The result is not range-checked (suppression weights exceed 1)."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(outputs) == 0 or weights.shape != (len(outputs),):
        raise ValueError("need one weight per teacher output")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    ref = outputs[0]
    for o in outputs[1:]:
        if o.conf.shape != ref.conf.shape:
            raise ValueError(f"teacher output shapes differ: {o.conf.shape} vs {ref.conf.shape}")
    p_start = sum(w * o.p_start for w, o in zip(weights, outputs))
    p_end = sum(w * o.p_end for w, o in zip(weights, outputs))
    conf = sum(w * o.conf for w, o in zip(weights, outputs))
    mask = np.logical_and.reduce([o.mask for o in outputs])
    return TeacherOutput(p_start, p_end, conf, mask)


def _bce(p, y):
    """Mean binary cross-entropy of clamped predictions ``p`` against ``y`` and its gradient in ``p``."""
    n = p.size
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    grad = (-y / pc + (1.0 - y) / (1.0 - pc)) / n
    # clamped entries have zero derivative
    grad = np.where((p > BCE_EPS) & (p < 1.0 - BCE_EPS), grad, 0.0)
    return float(loss.mean()), grad


def boundary_bce(student: TeacherOutput, target: TeacherOutput) -> float:
    """Start plus end BCE, the boundary part of :func:`bmn_loss`."""
    return _bce(student.p_start, target.p_start)[0] + _bce(student.p_end, target.p_end)[0]


def bmn_loss(student: TeacherOutput, target: TeacherOutput) -> tuple[float, OutputGrad]:
    """Proposal loss: BCE on start and end probabilities plus MSE over valid confidence cells."""
    if student.conf.shape != target.conf.shape:
        raise ValueError(f"student {student.conf.shape} and target {target.conf.shape} shapes differ")
    ls, gs = _bce(student.p_start, target.p_start)
    le, ge = _bce(student.p_end, target.p_end)
    cells = student.mask & target.mask
    n_cells = max(int(cells.sum()), 1)
    diff = np.where(cells, student.conf - target.conf, 0.0)
    lc = float((diff ** 2).sum() / n_cells)
    gc = 2.0 * diff / n_cells
    return ls + le + lc, OutputGrad(gs, ge, gc)


def feature_mse(Vs, Vi) -> tuple[float, np.ndarray]:
    diff = Vs - Vi
    return float((diff ** 2).mean()), 2.0 * diff / diff.size


def distill_loss(student: TeacherOutput, Vs, outputs: list[TeacherOutput], feats: list,
                 weights, hard: TeacherOutput | None = None,
                 hard_weight: float = 1.0) -> tuple[float, OutputGrad, np.ndarray]:
    """``f(O', sum w_i O_i) + sum w_i MSE(V', V_i)`` with gradients in ``O'`` and ``V'``.

    With ``hard`` given, ``hard_weight * f(O', hard)`` is added: matched
    proposal-sentence pairs used as hard labels next to the soft ones.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(feats) != len(outputs):
        raise ValueError("need one feature sequence per teacher output")
    Vs = check_features(Vs)
    value, g_out = bmn_loss(student, fuse_labels(weights, outputs))
    g_feat = np.zeros_like(Vs)
    for w, Vi in zip(weights, feats):
        Vi = check_features(Vi)
        if Vi.shape != Vs.shape:
            raise ValueError(f"teacher features {Vi.shape} differ from student features {Vs.shape}")
        m, gm = feature_mse(Vs, Vi)
        value += w * m
        g_feat += w * gm
    if hard is not None:
        lh, gh = bmn_loss(student, hard)
        value += hard_weight * lh
        g_out = g_out + gh.scale(hard_weight)
    return value, g_out, g_feat


def final_distill_loss(Lp: float, Lp_bar: float, gamma: float = 0.8, eta: float = 0.2) -> float:
    if gamma < 0 or eta < 0:
        raise ValueError("gamma and eta must be non-negative")
    return gamma * Lp + eta * Lp_bar


@dataclass
class DistillTerms:
    q: np.ndarray
    g: np.ndarray
    g_bar: np.ndarray
    Lp: float
    Lp_bar: float
    total: float
    grad_out: OutputGrad
    grad_feat: np.ndarray


def distill_objective(student: TeacherOutput, Vs, outputs: list[TeacherOutput], feats: list,
                      params: GatingParams, gamma: float = 0.8, eta: float = 0.2,
                      hard: TeacherOutput | None = None, hard_weight: float = 1.0) -> DistillTerms:
    """Full proposal objective ``gamma * L_p + eta * L_p_bar``.

    Teacher weights are computed from the gating network and held fixed, so
    the returned gradients cover the student outputs and the direct feature
    terms only.
    """
    q = np.array([compatibility_score(Vi, Vs, params) for Vi in feats])
    g = teacher_weights(q)
    g_bar = suppression_weights(g)
    Lp, go, gf = distill_loss(student, Vs, outputs, feats, g, hard, hard_weight)
    Lb, gob, gfb = distill_loss(student, Vs, outputs, feats, g_bar, hard, hard_weight)
    total = final_distill_loss(Lp, Lb, gamma, eta)
    return DistillTerms(q, g, g_bar, Lp, Lb, total,
                        go.scale(gamma) + gob.scale(eta), gamma * gf + eta * gfb)


def fit_student(init: TeacherOutput, target: TeacherOutput, steps: int = 2000,
                lr_boundary: float = 1.0, lr_conf: float | None = None,
                tol: float = 1e-10, hard: TeacherOutput | None = None,
                hard_weight: float = 1.0) -> tuple[TeacherOutput, list[float]]:
    """Plain gradient descent on free student outputs under :func:`bmn_loss`.

    ``lr_conf`` defaults to a step that is stable for the per-cell MSE scale.
    Stops when the largest gradient entry drops below ``tol``.
    """
    student = init.copy()
    if lr_conf is None:
        lr_conf = 0.25 * max(int((student.mask & target.mask).sum()), 1)
    trace = []
    for _ in range(steps):
        value, grad = bmn_loss(student, target)
        if hard is not None:
            lh, gh = bmn_loss(student, hard)
            value += hard_weight * lh
            grad = grad + gh.scale(hard_weight)
        trace.append(value)
        gmax = max(np.abs(grad.p_start).max(), np.abs(grad.p_end).max(), np.abs(grad.conf).max())
        if not np.isfinite(value):
            raise FloatingPointError("student fit diverged")
        if gmax < tol:
            break
        student.p_start = np.clip(student.p_start - lr_boundary * grad.p_start, BCE_EPS, 1 - BCE_EPS)
        student.p_end = np.clip(student.p_end - lr_boundary * grad.p_end, BCE_EPS, 1 - BCE_EPS)
        student.conf = student.conf - lr_conf * grad.conf
    return student, trace


def pairs_to_hard_labels(pairs, T: int, D: int | None = None) -> TeacherOutput:
    """Hard proposal targets from matched proposal-sentence pairs.

    Boundaries are marked with a one-frame tolerance on each side; the
    confidence map is each candidate's best IoU against the matched intervals.
    """
    D = T if D is None else D
    intervals = []
    for pair in pairs:
        iv = pair.proposal.interval if hasattr(pair, "proposal") else pair
        if iv.end > T:
            raise ValueError(f"matched interval [{iv.start}, {iv.end}) exceeds length {T}")
        intervals.append(iv)
    p_start = np.zeros(T)
    p_end = np.zeros(T)
    for iv in intervals:
        s, e = int(round(iv.start)), int(round(iv.end)) - 1
        p_start[max(s - 1, 0):min(s + 2, T)] = 1.0
        p_end[max(e - 1, 0):min(e + 2, T)] = 1.0
    return TeacherOutput(p_start, p_end, iou_map(intervals, T, D))

