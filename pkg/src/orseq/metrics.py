"""Sentence- and corpus-level BLEU over token sequences (ids or strings)."""

from __future__ import annotations

import math
from collections import Counter
from typing import Hashable, Sequence

MAX_ORDER = 4


def ngram_profile(tokens: Sequence[Hashable], max_order: int = MAX_ORDER) -> list[Counter]:
    """Counters of n-grams for n = 1..max_order (index 0 holds unigrams)."""
    toks = tuple(tokens)
    return [
        Counter(toks[i : i + n] for i in range(len(toks) - n + 1))
        for n in range(1, max_order + 1)
    ]


def _matches(hyp_prof: list[Counter], ref_prof: list[Counter]) -> list[int]:
    # clipped counts
    return [
        sum(min(c, r[g]) for g, c in h.items()) for h, r in zip(hyp_prof, ref_prof)
    ]


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    if hyp_len >= ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / hyp_len)


def sentence_bleu(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    """Smoothed BLEU-4 of one hypothesis against one reference.

    Unigram precision is left as is; orders 2-4 use (matches + 1) / (total + 1)
    so short or partially matching candidates still get a usable score.
    """
    if len(hyp) == 0 or len(ref) == 0:
        return 0.0
    hp, rp = ngram_profile(hyp), ngram_profile(ref)
    matches = _matches(hp, rp)
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / len(hyp))
    for n in range(2, MAX_ORDER + 1):
        total = max(0, len(hyp) - n + 1)
        log_p += math.log((matches[n - 1] + 1) / (total + 1))
    return brevity_penalty(len(hyp), len(ref)) * math.exp(log_p / MAX_ORDER)


def corpus_stats(
    hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]
) -> tuple[list[int], list[int], int, int]:
    """Aggregate (matches per order, totals per order, hyp length, ref length)."""
    if len(hyps) != len(refs):
        raise ValueError(f"corpus_bleu: {len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        m = _matches(ngram_profile(hyp), ngram_profile(ref))
        for n in range(MAX_ORDER):
            matches[n] += m[n]
            totals[n] += max(0, len(hyp) - n)
        hyp_len += len(hyp)
        ref_len += len(ref)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> float:
    """Unsmoothed BLEU-4 with counts pooled over the corpus; in [0, 1]."""
    matches, totals, hyp_len, ref_len = corpus_stats(hyps, refs)
    if ref_len == 0:
        raise ValueError("corpus_bleu: references are empty")
    if any(m == 0 for m in matches):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_ORDER
    return brevity_penalty(hyp_len, ref_len) * math.exp(log_p)
