"""Caption loss and beam-search decoding over an abstract next-token model.

Sentences are tuples of token ids. ``BOS`` is implicit: a model is queried
with the tokens generated so far (the empty tuple at the first step). A
finished sentence ends with ``EOS``.
"""
from __future__ import annotations

from typing import Mapping, Protocol, Sequence

import numpy as np

BOS = 0
EOS = 1


class ConditionalTokenModel(Protocol):
    vocab_size: int

    def next_log_probs(self, prefix: tuple[int, ...], context=None) -> np.ndarray:
        ...


def check_sentence(tokens: Sequence[int], vocab_size: int | None = None) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise ValueError("empty sentence")
    if EOS in tokens[:-1]:
        raise ValueError("EOS may only appear as the last token")
    if vocab_size is not None and any(t < 0 or t >= vocab_size for t in tokens):
        raise ValueError("token id outside the vocabulary")
    return tokens


class TabularModel:
    """Next-token distributions looked up by prefix; unknown prefixes get a uniform distribution."""

    def __init__(self, table: Mapping[tuple, Sequence[float]], vocab_size: int):
        if vocab_size < 2:
            raise ValueError("vocabulary must contain at least BOS and EOS")
        self.vocab_size = vocab_size
        self.table = {}
        for prefix, dist in table.items():
            p = np.asarray(dist, dtype=np.float64)
            if p.shape != (vocab_size,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
                raise ValueError(f"malformed distribution for prefix {prefix!r}")
            with np.errstate(divide="ignore"):
                self.table[tuple(prefix)] = np.log(p)
        self._uniform = np.full(vocab_size, -np.log(vocab_size))

    def next_log_probs(self, prefix, context=None) -> np.ndarray:
        return self.table.get(tuple(prefix), self._uniform)


def tabular_model(table, vocab_size: int) -> TabularModel:
    return TabularModel(table, vocab_size)


def caption_ce_loss(pred, target: Sequence[int]) -> float:
    """Negative summed log-probability of the target tokens under per-step log-probability rows."""
    pred = np.asarray(pred, dtype=np.float64)
    target = tuple(target)
    if pred.ndim != 2 or pred.shape[0] != len(target):
        raise ValueError(f"{pred.shape[0] if pred.ndim else 0} prediction steps for {len(target)} target tokens")
    return float(-pred[np.arange(len(target)), list(target)].sum())


def sentence_log_prob(model: ConditionalTokenModel, tokens: Sequence[int], context=None) -> float:
    total = 0.0
    for t in range(len(tokens)):
        total += float(model.next_log_probs(tuple(tokens[:t]), context)[tokens[t]])
    return total


def _best(hyps):
    # highest score, then lexicographically smallest tokens
    return min(hyps, key=lambda h: (-h[0], h[1]))


def beam_search(model: ConditionalTokenModel, context=None, beam: int = 5, max_len: int = 20,
                length_normalize: bool = False) -> tuple[int, ...]:
    """Beam search from the implicit BOS.

    A hypothesis that emits EOS is finished and takes one slot away from the
    live beam. The highest-scoring finished hypothesis is returned, or the best
    live one if nothing finished within ``max_len`` tokens. Scores are summed
    log-probabilities; ``length_normalize`` divides by length for the final
    choice only.
    """
    if beam < 1 or max_len < 1:
        raise ValueError("beam and max_len must be >= 1")
    live = [(0.0, ())]
    finished = []
    for _ in range(max_len):
        width = beam - len(finished)
        if width <= 0 or not live:
            break
        cands = []
        for score, toks in live:
            lp = model.next_log_probs(toks, context)
            for tok in range(model.vocab_size):
                if np.isfinite(lp[tok]):
                    cands.append((score + float(lp[tok]), toks + (tok,)))
        cands.sort(key=lambda h: (-h[0], h[1]))
        live = []
        for score, toks in cands[:width]:
            (finished if toks[-1] == EOS else live).append((score, toks))
    pool = finished or live
    if not pool:
        raise ValueError("model assigns zero probability to every continuation")
    if length_normalize:
        return min(pool, key=lambda h: (-h[0] / len(h[1]), h[1]))[1]
    return _best(pool)[1]


def greedy_decode(model: ConditionalTokenModel, context=None, max_len: int = 20) -> tuple[int, ...]:
    toks = ()
    for _ in range(max_len):
        tok = int(np.argmax(model.next_log_probs(toks, context)))
        toks += (tok,)
        if tok == EOS:
            break
    return toks
