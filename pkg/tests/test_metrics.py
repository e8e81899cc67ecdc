import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsdvc.metrics import (IOU_THRESHOLDS, ar_at_an, auc, bleu_n, caption_scores, cider,
                           cider_per_item, match_by_gate, recall_at, retrieval_metrics)
from wsdvc.temporal import Interval, iou


def rank_oracle(sim, truth):
    ranks = []
    for q, t in enumerate(truth):
        order = sorted(range(sim.shape[1]), key=lambda g: (-sim[q, g], g))
        ranks.append(order.index(t) + 1)
    ranks.sort()
    return sum(r == 1 for r in ranks) / len(ranks), ranks[(len(ranks) - 1) // 2]


def bleu_oracle(cands, refs, N):
    # single-reference corpus BLEU written out term by term
    num, den = [0] * N, [0] * N
    c_len = sum(len(c) for c in cands)
    r_len = sum(len(r) for r in refs)
    for c, r in zip(cands, refs):
        for n in range(1, N + 1):
            cc = Counter(tuple(c[i:i + n]) for i in range(len(c) - n + 1))
            rc = Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
            num[n - 1] += sum(min(v, rc[g]) for g, v in cc.items())
            den[n - 1] += max(len(c) - n + 1, 0)
    if min(num) == 0:
        return 0.0
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(sum(math.log(a / b) for a, b in zip(num, den)) / N)


sentences = st.lists(st.integers(2, 6), min_size=1, max_size=8)


class TestRecall:
    def test_examples(self):
        gt = [Interval(0, 10)]
        assert recall_at([Interval(0, 9)], gt, 1, 0.5) == 1.0
        assert recall_at([Interval(0, 9)], gt, 1, 0.95) == 0.0
        assert recall_at(gt, gt, 1, 0.95) == 1.0

    def test_empty_gt(self):
        assert recall_at([Interval(0, 1)], [], 5, 0.5) == 1.0

    def test_only_top_an_counts(self):
        gt = [Interval(0, 10)]
        assert recall_at([Interval(20, 30), Interval(0, 10)], gt, 1, 0.5) == 0.0

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            recall_at([], [Interval(0, 1)], 1, 0.0)


class TestAR:
    def test_nine_of_ten_thresholds(self):
        curve = ar_at_an([([Interval(0, 9)], [Interval(0, 10)])], A_max=5)
        assert curve[0] == pytest.approx(0.9)

    def test_perfect_and_disjoint(self):
        gt = [Interval(0, 4), Interval(6, 9)]
        assert np.all(ar_at_an([(gt[:1], gt[:1])], 10) == 1.0)
        # two events need two proposals
        assert np.all(ar_at_an([(gt, gt)], 10)[1:] == 1.0)
        assert np.all(ar_at_an([([Interval(20, 30)], gt)], 10) == 0.0)

    def test_thresholds(self):
        assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_recall_oracle(self, seed):
        r = np.random.default_rng(seed)
        videos = []
        for _ in range(3):
            gt = [Interval(int(s), int(s) + int(d)) for s, d in zip(r.integers(0, 30, 3), r.integers(1, 10, 3))]
            props = [Interval(int(s), int(s) + int(d)) for s, d in zip(r.integers(0, 30, 12), r.integers(1, 10, 12))]
            videos.append((props, gt))
        curve = ar_at_an(videos, A_max=15)
        for AN in (1, 5, 12, 15):
            expected = np.mean([np.mean([recall_at(p, g, AN, t) for t in IOU_THRESHOLDS]) for p, g in videos])
            assert curve[AN - 1] == pytest.approx(expected, abs=1e-12)
        assert np.all(np.diff(curve) >= 0)
        # a stricter threshold set never has higher recall
        strict = ar_at_an(videos, 15, [t + 0.04 for t in IOU_THRESHOLDS])
        assert np.all(strict <= curve + 1e-12)


class TestAUC:
    def test_constants_and_ramp(self):
        assert auc(np.ones(100)) == pytest.approx(1.0)
        assert auc(np.full(100, 0.5)) == pytest.approx(0.5)
        assert auc(np.linspace(0, 1, 100)) == pytest.approx(0.5, abs=1e-9)

    def test_short_curve(self):
        with pytest.raises(ValueError):
            auc([1.0])

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=50))
    def test_bounds(self, xs):
        a = auc(sorted(xs))
        assert 0.0 <= a <= max(xs) + 1e-12


class TestRetrieval:
    def test_identity(self):
        assert retrieval_metrics(np.eye(4), np.arange(4)) == (1.0, 1)

    def test_reversed(self):
        sim = np.fliplr(np.eye(3))
        assert retrieval_metrics(sim, np.arange(3)) == rank_oracle(sim, np.arange(3))
        assert retrieval_metrics(sim, np.arange(3))[0] == pytest.approx(1 / 3)

    def test_all_equal(self):
        assert retrieval_metrics(np.ones((2, 2)), [0, 1]) == (0.5, 1)

    @pytest.mark.parametrize("perm", list(itertools.permutations(range(3))))
    def test_permutation_matrices(self, perm):
        sim = np.eye(3)[list(perm)]
        truth = np.arange(3)
        r1, mr = retrieval_metrics(sim, truth)
        assert (r1, mr) == rank_oracle(sim, truth)
        assert r1 == pytest.approx(sum(p == i for i, p in enumerate(perm)) / 3)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
    def test_random_oracle(self, seed, Q, G):
        r = np.random.default_rng(seed)
        sim = r.integers(0, 3, (Q, G)).astype(float)  # coarse values force ties
        truth = r.integers(0, G, Q)
        assert retrieval_metrics(sim, truth) == rank_oracle(sim, truth)

    def test_bad_truth(self):
        with pytest.raises(ValueError):
            retrieval_metrics(np.eye(2), [0, 2])
        with pytest.raises(ValueError):
            retrieval_metrics(np.eye(2), [0])


class TestBleu:
    def test_identity(self):
        corpus = [[2, 3, 4, 5], [6, 7, 8, 9, 2]]
        for N in range(1, 5):
            assert bleu_n(corpus, corpus, N) == pytest.approx(1.0)

    def test_hand_bigram(self):
        assert bleu_n([[2, 3, 4]], [[2, 3, 5]], 2) == pytest.approx(math.sqrt(2 / 3 * 1 / 2), abs=1e-6)
        assert bleu_n([[2, 3, 4]], [[2, 3, 5]], 2) == pytest.approx(0.5774, abs=1e-4)

    def test_brevity_penalty(self):
        assert bleu_n([[2, 3, 4]], [[2, 3, 4, 5, 6, 7]], 2) == pytest.approx(math.exp(1 - 2))

    def test_no_smoothing(self):
        assert bleu_n([[2, 3]], [[3, 2]], 2) == 0.0

    def test_bad_input(self):
        with pytest.raises(ValueError):
            bleu_n([], [], 1)
        with pytest.raises(ValueError):
            bleu_n([[2]], [[2]], 5)

    @settings(max_examples=100)
    @given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=5), st.integers(1, 4))
    def test_against_oracle(self, pairs, N):
        cands, refs = [p[0] for p in pairs], [p[1] for p in pairs]
        assert bleu_n(cands, refs, N) == pytest.approx(bleu_oracle(cands, refs, N), abs=1e-12)

    @given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=5), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = bleu_n([p[0] for p in pairs], [p[1] for p in pairs], 2)
        b = bleu_n([p[0] for p in shuffled], [p[1] for p in shuffled], 2)
        assert a == pytest.approx(b, abs=1e-12)


class TestCider:
    def test_self_match(self):
        corpus = [[2, 3, 4, 5], [6, 7, 8, 9, 2]]
        assert cider(corpus, [[c] for c in corpus]) == pytest.approx(10.0, abs=1e-6)
        assert cider_per_item([[2, 3, 4, 5], [6, 7, 8]], [[[2, 3, 4, 5]], [[9, 6, 7, 2]]])[0] == \
            pytest.approx(10.0, abs=1e-6)

    def test_no_overlap(self):
        assert cider_per_item([[2, 3], [4, 5]], [[[6, 7]], [[4, 5]]])[0] == 0.0

    def test_permuted_unigrams(self):
        # both items' words appear in one reference each, so all IDFs are equal and cos1 = 1
        scores = cider_per_item([[2, 3, 4], [5, 6, 7]], [[[4, 3, 2]], [[5, 6, 7]]])
        assert scores[0] == pytest.approx(10 * 1.0 / 4, abs=1e-9)

    def test_words_in_every_reference_carry_no_weight(self):
        # "2" appears in both references: its IDF is zero
        scores = cider_per_item([[2], [2, 3]], [[[2]], [[2, 3]]])
        assert scores[0] == 0.0

    @given(st.lists(st.integers(2, 30), min_size=4, max_size=9), st.lists(st.integers(31, 40), min_size=1, max_size=5))
    def test_self_match_any_sentence(self, s, other):
        assert cider_per_item([s, other], [[s], [other]])[0] == pytest.approx(10.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            cider([], [])


class TestCaptionScores:
    def test_gate(self):
        pred = [Interval(0, 10), Interval(0, 4), Interval(20, 30)]
        gt = [Interval(0, 5), Interval(22, 30), Interval(50, 60)]
        assert match_by_gate(pred, gt, 0.5) == [1, 2, None]

    def test_identity_and_missing(self):
        gt = [(Interval(0, 5), [2, 3, 4]), (Interval(6, 9), [5, 6, 7])]
        perfect = caption_scores([(gt, gt)])
        assert perfect["bleu1"] == pytest.approx(1.0) and perfect["pairs"] == 2
        # an unmatched GT event counts as an empty candidate
        half = caption_scores([(gt[:1], gt)])
        assert half["bleu1"] < 1.0
        assert iou(gt[0][0], gt[1][0]) == 0.0
