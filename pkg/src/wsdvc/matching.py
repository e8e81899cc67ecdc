"""Cross-modal proposal/sentence matching.

Clips and sentences are mapped into a shared space by linear maps over
mean-pooled features. Training combines a margin contrastive loss on cosine
distances with a cycle-consistency loss on raw squared distances; at the end
each sentence is assigned the proposal with the highest cosine similarity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .proposals import ScoredProposal
from .temporal import Interval, check_features, even_split

DEFAULT_MARGIN = 0.2


class DegenerateEmbeddingError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class EmbedParams:
    P_visual: np.ndarray
    P_lexical: np.ndarray

    def __post_init__(self):
        self.P_visual = np.asarray(self.P_visual, dtype=np.float64)
        self.P_lexical = np.asarray(self.P_lexical, dtype=np.float64)
        if self.P_visual.ndim != 2 or self.P_lexical.ndim != 2:
            raise ValueError("projection maps must be matrices")
        if self.P_visual.shape[0] != self.P_lexical.shape[0]:
            raise ValueError("visual and lexical maps must share the embedding dimension")

    @classmethod
    def identity(cls, d: int, d_lex: int | None = None) -> "EmbedParams":
        return cls(np.eye(d), np.eye(d, d if d_lex is None else d_lex))

    @classmethod
    def random(cls, e: int, d: int, d_lex: int, rng: np.random.Generator,
               scale: float | None = None) -> "EmbedParams":
        sv = 1.0 / np.sqrt(d) if scale is None else scale
        sl = 1.0 / np.sqrt(d_lex) if scale is None else scale
        return cls(rng.normal(0.0, sv, (e, d)), rng.normal(0.0, sl, (e, d_lex)))

    def copy(self) -> "EmbedParams":
        return EmbedParams(self.P_visual.copy(), self.P_lexical.copy())


@dataclass(frozen=True)
class MatchPair:
    sentence_index: int
    proposal: ScoredProposal
    similarity: float


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise DegenerateEmbeddingError("zero-norm embedding")
    return v / n


def _cos_dist_grad(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateEmbeddingError("zero-norm embedding")
    c = float(a @ b) / (na * nb)
    ga = -(b / (na * nb) - c * a / na ** 2)
    gb = -(a / (na * nb) - c * b / nb ** 2)
    return 1.0 - c, ga, gb


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return _cos_dist_grad(a, b)[0]


def embed_clip(feats, interval: Interval, params: EmbedParams, normalize: bool = True) -> np.ndarray:
    feats = check_features(feats)
    s, e = int(round(interval.start)), int(round(interval.end))
    if e > feats.shape[0]:
        raise ValueError(f"interval [{s}, {e}) exceeds sequence length {feats.shape[0]}")
    if e <= s:
        raise ValueError("empty interval")
    z = params.P_visual @ feats[s:e].mean(axis=0)
    return _unit(z) if normalize else z


def embed_sentence(vec, params: EmbedParams, normalize: bool = True) -> np.ndarray:
    z = params.P_lexical @ np.asarray(vec, dtype=np.float64)
    return _unit(z) if normalize else z


def contrastive_value(d_pos: float, d_neg_clip: float, d_neg_sent: float, d_clips: float,
                      d_sents: float, h: float = DEFAULT_MARGIN) -> float:
    """Contrastive loss from the five cosine distances it depends on.

    ``d_neg_clip`` is D(c-, s+), ``d_neg_sent`` is D(c+, s-), ``d_clips`` is
    D(c+, c-) and ``d_sents`` is D(s+, s-).
    """
    return (max(0.0, h + d_pos - d_neg_clip) + max(0.0, h + d_pos - d_neg_sent)
            + max(0.0, h - d_clips) + max(0.0, h - d_sents))


def contrastive_loss(cp, sp, cn, sn, h: float = DEFAULT_MARGIN):
    """Margin loss for one positive pair and its two cross-modal negatives.

    Returns ``(value, (g_cp, g_sp, g_cn, g_sn))``.
    """
    if h < 0:
        raise ValueError("margin must be >= 0")
    cp, sp, cn, sn = (np.asarray(x, dtype=np.float64) for x in (cp, sp, cn, sn))
    d_pos, g_pos_c, g_pos_s = _cos_dist_grad(cp, sp)
    d_ns, g_ns_c, g_ns_s = _cos_dist_grad(cn, sp)
    d_pn, g_pn_c, g_pn_s = _cos_dist_grad(cp, sn)
    d_cc, g_cc_p, g_cc_n = _cos_dist_grad(cp, cn)
    d_ss, g_ss_p, g_ss_n = _cos_dist_grad(sp, sn)

    g_cp, g_sp = np.zeros_like(cp), np.zeros_like(sp)
    g_cn, g_sn = np.zeros_like(cn), np.zeros_like(sn)
    if h + d_pos - d_ns > 0:
        g_cp += g_pos_c
        g_sp += g_pos_s - g_ns_s
        g_cn -= g_ns_c
    if h + d_pos - d_pn > 0:
        g_cp += g_pos_c - g_pn_c
        g_sp += g_pos_s
        g_sn -= g_pn_s
    # intra-modal terms: the unchanged positive pair has distance 0
    if h - d_cc > 0:
        g_cp -= g_cc_p
        g_cn -= g_cc_n
    if h - d_ss > 0:
        g_sp -= g_ss_p
        g_sn -= g_ss_n
    value = contrastive_value(d_pos, d_ns, d_pn, d_cc, d_ss, h)
    return value, (g_cp, g_sp, g_cn, g_sn)


def _normalize_rows(X):
    n = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateEmbeddingError("zero-norm embedding")
    return X / n, n


def _unnormalize_grad(g, Xn, n):
    return (g - Xn * np.sum(Xn * g, axis=1, keepdims=True)) / n


def video_contrastive(clips, sents, h: float = DEFAULT_MARGIN):
    """Sum of :func:`contrastive_loss` over all ordered (positive i, negative j != i) tuples.

    ``clips[i]`` and ``sents[i]`` form the positive pairs. Returns
    ``(value, g_clips, g_sents)``.
    """
    C = np.asarray(clips, dtype=np.float64)
    S = np.asarray(sents, dtype=np.float64)
    if C.shape != S.shape:
        raise ValueError("clip and sentence embedding counts differ")
    N = C.shape[0]
    Cn, nc = _normalize_rows(C)
    Sn, ns = _normalize_rows(S)
    Dcs = 1.0 - Cn @ Sn.T
    Dcc = 1.0 - Cn @ Cn.T
    Dss = 1.0 - Sn @ Sn.T
    off = ~np.eye(N, dtype=bool)
    pos = np.diag(Dcs)
    t1 = h + pos[None, :] - Dcs          # [j, i]: negative clip j against sentence i
    t2 = h + pos[:, None] - Dcs          # [i, j]: clip i against negative sentence j
    t3 = h - Dcc
    t4 = h - Dss
    a1, a2 = (t1 > 0) & off, (t2 > 0) & off
    a3, a4 = (t3 > 0) & off, (t4 > 0) & off
    value = float(t1[a1].sum() + t2[a2].sum() + t3[a3].sum() + t4[a4].sum())

    G = np.zeros((N, N))                 # dL/dDcs
    G -= a1
    G -= a2
    np.fill_diagonal(G, a1.sum(axis=0) + a2.sum(axis=1))
    Gcc = -a3.astype(float)
    Gss = -a4.astype(float)
    gCn = -(G @ Sn) - (Gcc + Gcc.T) @ Cn
    gSn = -(G.T @ Cn) - (Gss + Gss.T) @ Sn
    return value, _unnormalize_grad(gCn, Cn, nc), _unnormalize_grad(gSn, Sn, ns)


def _softmax_rows(A):
    A = A - A.max(axis=1, keepdims=True)
    E = np.exp(A)
    return E / E.sum(axis=1, keepdims=True)


def _sqdist(X, Y):
    return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)


def soft_nearest_clip(s, clips):
    """Distance-softmax weights of ``clips`` for sentence ``s`` and the weighted clip."""
    s = np.asarray(s, dtype=np.float64)
    C = np.asarray(clips, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] < 1:
        raise ValueError("need at least one clip embedding")
    alphas = _softmax_rows(-_sqdist(s[None, :], C))[0]
    return alphas, alphas @ C


def soft_location(cbar, sentences) -> float:
    """Expected 1-based index of ``cbar`` among ``sentences`` under distance-softmax weights."""
    S = np.asarray(sentences, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1:
        raise ValueError("need at least one sentence embedding")
    beta = _softmax_rows(-_sqdist(np.asarray(cbar, dtype=np.float64)[None, :], S))[0]
    return float(beta @ np.arange(1, S.shape[0] + 1))


def _cycle_direction(X, Y):
    """Mean over sources ``x_i`` of ``(i - u_i)**2`` for the cycle x -> Y -> X, with gradients."""
    N = X.shape[0]
    idx = np.arange(1, N + 1, dtype=np.float64)
    alpha = _softmax_rows(-_sqdist(X, Y))
    Cbar = alpha @ Y
    beta = _softmax_rows(-_sqdist(Cbar, X))
    u = beta @ idx
    value = float(np.mean((idx - u) ** 2))

    gu = -2.0 * (idx - u) / N
    gB = gu[:, None] * beta * (idx[None, :] - u[:, None])
    gCbar = -2.0 * (gB.sum(axis=1, keepdims=True) * Cbar - gB @ X)
    gX = 2.0 * (gB.T @ Cbar - gB.sum(axis=0)[:, None] * X)
    gY = alpha.T @ gCbar
    galpha = gCbar @ Y.T
    gA = alpha * (galpha - np.sum(alpha * galpha, axis=1, keepdims=True))
    gX += -2.0 * (gA.sum(axis=1, keepdims=True) * X - gA @ Y)
    gY += 2.0 * (gA.T @ X - gA.sum(axis=0)[:, None] * Y)
    return value, gX, gY


def cycle_loss(sentences, clips):
    """Sentence-side plus clip-side cycle consistency. Returns ``(value, g_sentences, g_clips)``."""
    S = np.asarray(sentences, dtype=np.float64)
    C = np.asarray(clips, dtype=np.float64)
    if S.ndim != 2 or S.shape != C.shape:
        raise ValueError(f"need equal numbers of sentences and clips, got {S.shape} and {C.shape}")
    v1, gS1, gC1 = _cycle_direction(S, C)
    v2, gC2, gS2 = _cycle_direction(C, S)
    return v1 + v2, gS1 + gS2, gC1 + gC2


@dataclass
class MatchingLoss:
    contrastive: float
    cycle: float
    g_clips: list = field(repr=False, default_factory=list)
    g_sents: list = field(repr=False, default_factory=list)

    @property
    def total(self) -> float:
        return self.contrastive + self.cycle


def matching_loss(batch, h: float = DEFAULT_MARGIN, use_cycle: bool = True) -> MatchingLoss:
    """Contrastive plus cycle loss summed over videos.

    ``batch`` is a sequence of ``(clip_embeddings, sentence_embeddings)``
    pairs, each an (N, e) array with row ``i`` of both forming a positive pair.
    """
    con = cyc = 0.0
    gcs, gss = [], []
    for clips, sents in batch:
        C = np.asarray(clips, dtype=np.float64)
        S = np.asarray(sents, dtype=np.float64)
        v, gC, gS = video_contrastive(C, S, h)
        con += v
        if use_cycle:
            vc, gS2, gC2 = cycle_loss(S, C)
            cyc += vc
            gC, gS = gC + gC2, gS + gS2
        gcs.append(gC)
        gss.append(gS)
    return MatchingLoss(con, cyc, gcs, gss)


@dataclass
class MatchVideo:
    """Training example: a feature sequence and the lexical features of its paragraph's sentences."""
    feats: np.ndarray
    sentences: np.ndarray


def clip_means(feats, n: int) -> np.ndarray:
    feats = check_features(feats)
    return np.stack([feats[int(iv.start):int(iv.end)].mean(axis=0) for iv in even_split(feats.shape[0], n)])


def _forward(videos, params, h, use_cycle=True):
    means = [clip_means(v.feats, len(v.sentences)) for v in videos]
    batch = [(M @ params.P_visual.T, np.asarray(v.sentences) @ params.P_lexical.T)
             for M, v in zip(means, videos)]
    loss = matching_loss(batch, h, use_cycle)
    gPv = sum(gC.T @ M for gC, M in zip(loss.g_clips, means))
    gPl = sum(gS.T @ np.asarray(v.sentences) for gS, v in zip(loss.g_sents, videos))
    return loss, gPv, gPl


def matching_objective(videos: list[MatchVideo], params: EmbedParams, h: float = DEFAULT_MARGIN):
    """Matching loss of a dataset under even-split clip/sentence correspondence."""
    return _forward(videos, params, h)[0]


def _gd_step(videos, params, loss, grads, lr, h, line_search, max_halvings):
    gPv, gPl = grads
    gsq = float(np.sum(gPv ** 2) + np.sum(gPl ** 2))
    step = lr
    for _ in range(max_halvings + 1 if line_search else 1):
        cand = EmbedParams(params.P_visual - step * gPv, params.P_lexical - step * gPl)
        new, nPv, nPl = _forward(videos, cand, h)
        if not line_search or new.total <= loss.total - 1e-4 * step * gsq:
            return cand, new, (nPv, nPl)
        step *= 0.5
    return params, loss, grads


def train_matcher(videos: list[MatchVideo], init: EmbedParams | None = None, steps: int = 300,
                  lr: float = 0.05, h: float = DEFAULT_MARGIN, seed: int = 0,
                  embed_dim: int | None = None, optimizer: str = "adam",
                  line_search: bool = True, max_halvings: int = 30) -> tuple[EmbedParams, list[float]]:
    """Full-batch training of both linear maps on the matching loss.

    Each video is split evenly into as many clips as it has sentences and clip
    ``i`` is paired with sentence ``i``. When ``init`` is None the maps are
    drawn from ``seed``.

    ``optimizer="adam"`` uses Adam steps of size ``lr``. ``optimizer="gd"``
    uses plain gradient steps; with ``line_search`` the step starts at ``lr``
    and is halved until the Armijo condition holds, so the loss never
    increases (a step not accepted after ``max_halvings`` halvings is skipped).

    Returns the final parameters and the loss trace, initial loss first.
    """
    if not videos:
        raise ValueError("empty training set")
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if init is None:
        d = videos[0].feats.shape[1]
        d_lex = np.asarray(videos[0].sentences).shape[1]
        init = EmbedParams.random(embed_dim or d, d, d_lex, np.random.default_rng(seed))
    params = init.copy()
    loss, gPv, gPl = _forward(videos, params, h)
    grads = (gPv, gPl)
    trace = [loss.total]
    m = [np.zeros_like(params.P_visual), np.zeros_like(params.P_lexical)]
    v = [np.zeros_like(params.P_visual), np.zeros_like(params.P_lexical)]
    b1, b2 = 0.9, 0.999
    for t in range(1, steps + 1):
        if not np.isfinite(trace[-1]):
            raise TrainingDivergedError("matching loss became non-finite; lower the step size")
        if lr == 0:
            trace.append(trace[-1])
            continue
        if optimizer == "gd":
            params, loss, grads = _gd_step(videos, params, loss, grads, lr, h, line_search, max_halvings)
        else:
            new = []
            for k, (P, g) in enumerate(zip((params.P_visual, params.P_lexical), grads)):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh, vh = m[k] / (1 - b1 ** t), v[k] / (1 - b2 ** t)
                new.append(P - lr * mh / (np.sqrt(vh) + 1e-8))
            params = EmbedParams(*new)
            loss, gPv, gPl = _forward(videos, params, h)
            grads = (gPv, gPl)
        trace.append(loss.total)
    if not np.isfinite(trace[-1]):
        raise TrainingDivergedError("matching loss became non-finite; lower the step size")
    return params, trace


def assign_proposals(proposals: list[ScoredProposal], feats, sentences,
                     params: EmbedParams) -> list[MatchPair]:
    """Pick, for every sentence embedding, the proposal whose clip embedding is most cosine-similar.

    Exact ties go to the earlier-starting proposal.
    """
    if not proposals:
        raise ValueError("no proposals to assign")
    feats = check_features(feats)
    C = np.stack([embed_clip(feats, p.interval, params) for p in proposals])
    S, _ = _normalize_rows(np.atleast_2d(np.asarray(sentences, dtype=np.float64)))
    sim = S @ C.T
    order = sorted(range(len(proposals)), key=lambda k: (proposals[k].start, proposals[k].interval.length))
    pairs = []
    for i in range(S.shape[0]):
        best = max(order, key=lambda k: sim[i, k])  # max keeps the first maximal element
        pairs.append(MatchPair(i, proposals[best], float(sim[i, best])))
    return pairs


def make_pseudo_video(images, captions, frames_per_image: int = 8, sigma: float = 0.1,
                      seed: int = 0) -> tuple[np.ndarray, list]:
    """Repeat each image feature ``frames_per_image`` times with Gaussian noise.

    Returns the frame sequence and the paragraph (captions in order).
    """
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    if len(images) != len(captions) or len(images) < 1:
        raise ValueError("need one caption per image and at least one image")
    if frames_per_image < 1 or sigma < 0:
        raise ValueError("frames_per_image must be >= 1 and sigma >= 0")
    rng = np.random.default_rng(seed)
    frames = np.repeat(images, frames_per_image, axis=0)
    if sigma > 0:
        frames = frames + rng.normal(0.0, sigma, frames.shape)
    return frames, [tuple(c) for c in captions]
