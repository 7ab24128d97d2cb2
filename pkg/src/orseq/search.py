"""Beam search for inference and length-constrained force decoding for oracles."""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import BOS, EOS, NUM_RESERVED, PAD
from .gumbel import GumbelConfig, log_probs
from .model import DecoderState, ModelParams, decoder_step, encode, initial_state
from .numerics import Tensor


@dataclasses.dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: DecoderState | None = None
    finished: bool = False

    def __len__(self) -> int:
        return len(self.tokens)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 5


def _top(total: np.ndarray, n: int) -> np.ndarray:
    # stable sort: ties go to the earlier beam, then the lower token id
    return np.argsort(-total, axis=-1, kind="stable")[..., :n]


def greedy_decode(params: ModelParams, src: Sequence[int], max_len: int | None = None) -> list[int]:
    """Argmax decoding; output includes the final EOS if one was produced."""
    max_len = default_max_len(len(src)) if max_len is None else max_len
    with nx.no_grad():
        ann = encode(params, [src])
        state = initial_state(params, ann)
        y, out = BOS, []
        for _ in range(max_len):
            state, logits = decoder_step(params, [y], state, ann)
            lp = log_probs(logits.value[0])
            lp[[PAD, BOS]] = -np.inf
            y = int(np.argmax(lp))
            out.append(y)
            if y == EOS:
                break
    return out


def beam_search(
    params: ModelParams,
    src: Sequence[int],
    beam_size: int,
    max_len: int | None = None,
    noise: GumbelConfig | None = None,
) -> list[Hypothesis]:
    """Plain (un-normalized) beam search over the model's next-word distributions.

    PAD and BOS are never generated.  See ``beam_search_steps`` for the
    expansion rule.
    """
    max_len = default_max_len(len(src)) if max_len is None else max_len
    with nx.no_grad():
        ann = encode(params, [src])

        def step(state: DecoderState, y_prev: np.ndarray):
            state, logits = decoder_step(params, y_prev, state, ann.repeat(len(y_prev)))
            lp = log_probs(logits.value, noise)
            lp[:, [PAD, BOS]] = -np.inf
            return state, lp

        return beam_search_steps(step, initial_state(params, ann), beam_size, max_len)


def beam_search_steps(
    step: Callable[[Any, np.ndarray], tuple[Any, np.ndarray]],
    state: Any,
    beam_size: int,
    max_len: int,
    bos: int = BOS,
    eos: int = EOS,
) -> list[Hypothesis]:
    """Beam search driven by ``step(state, y_prev) -> (state, log_probs)``.

    ``state`` holds one row per live hypothesis and must offer ``select(rows)``.
    Each step keeps the best ``beam_size - len(finished)`` expansions of the
    live hypotheses; an expansion ending in ``eos`` is finished.  Returns the
    finished hypotheses by score, or, if none finished within ``max_len``,
    the live ones with ``finished=False``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    y_prev = np.array([bos])
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        state, lp = step(state, y_prev)
        V = lp.shape[1]
        total = (scores[:, None] + lp).reshape(-1)
        keep = []
        for idx in _top(total, beam_size - len(finished)):
            if not np.isfinite(total[idx]):
                continue
            b, tok = divmod(int(idx), V)
            if tok == eos:
                hyp_state = state.select(np.array([b]))
                finished.append(Hypothesis((*tokens[b].tolist(), eos), float(total[idx]), hyp_state, True))
            else:
                keep.append(idx)
        if not keep or len(finished) >= beam_size:
            break
        rows, toks = np.divmod(np.array(keep), V)
        tokens = np.concatenate([tokens[rows], toks[:, None]], axis=1)
        scores = total[keep]
        state = state.select(rows)
        y_prev = toks
    else:
        finished = finished or [
            Hypothesis(tuple(tokens[i].tolist()), float(scores[i]), state.select(np.array([i])), False)
            for i in range(len(scores))
        ]
    return sorted(finished, key=lambda h: -h.score)


def check_force_vocab(vocab_size: int) -> None:
    if vocab_size - NUM_RESERVED < 2:
        raise ValueError(
            f"force decoding needs at least 2 non-special target tokens, vocabulary has {vocab_size}"
        )


def force_decode_batch(
    params: ModelParams,
    srcs: Sequence[Sequence[int]],
    ref_lens: Sequence[int],
    beam_size: int,
    noise: GumbelConfig | None = None,
) -> list[list[Hypothesis]]:
    """Force decoding for a batch of sources, each with its own target length L.

    For steps j <= L, EOS (as well as PAD and BOS) is removed from the
    expansion pool, so whenever EOS would be picked the next-best word is taken.
    At step L + 1 every hypothesis is closed with EOS whatever its rank.  With
    ``noise`` the per-step distributions are Gumbel-perturbed, i.i.d. per row,
    step and vocabulary entry.

    Returns, per source, up to ``beam_size`` hypotheses of length L + 1 sorted
    by score (fewer only when fewer than ``beam_size`` distinct EOS-free
    sequences of length L exist).
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    check_force_vocab(params.dims.tgt_vocab)
    L = np.asarray(ref_lens, dtype=np.int64)
    if len(L) != len(srcs):
        raise ValueError("one reference length per source is required")
    if L.size and L.min() < 1:
        raise ValueError("reference length must be >= 1")
    B, k = len(srcs), beam_size
    with nx.no_grad():
        ann = encode(params, srcs)
        s0 = initial_state(params, ann)
        annk = ann.repeat(k)
        state = DecoderState(Tensor(np.repeat(s0.s.value, k, axis=0)))
        scores = np.full((B, k), -np.inf)
        scores[:, 0] = 0.0
        tokens = np.zeros((B, k, 0), dtype=np.int64)
        y_prev = np.full(B * k, BOS, dtype=np.int64)
        base = (np.arange(B) * k)[:, None]
        for j in range(1, int(L.max()) + 2):
            state, logits = decoder_step(params, y_prev, state, annk)
            lp = log_probs(logits.value, noise)
            V = lp.shape[1]
            lp = lp.reshape(B, k, V)

            open_ = j <= L
            closing = j == L + 1
            cand = lp.copy()
            cand[..., [PAD, BOS, EOS]] = -np.inf
            total = (scores[:, :, None] + cand).reshape(B, k * V)
            chosen = _top(total, k)
            beam_idx, tok = np.divmod(chosen, V)
            new_scores = np.take_along_axis(total, chosen, axis=1)

            stay = np.broadcast_to(np.arange(k), (B, k))
            beam_idx = np.where(open_[:, None], beam_idx, stay)
            tok = np.where(open_[:, None], tok, np.where(closing[:, None], EOS, PAD))
            new_scores = np.where(
                open_[:, None],
                new_scores,
                np.where(closing[:, None], scores + lp[:, :, EOS], scores),
            )
            kept = np.take_along_axis(
                tokens, np.broadcast_to(beam_idx[:, :, None], tokens.shape), axis=1
            )
            tokens = np.concatenate([kept, tok[:, :, None]], axis=2)
            rows = (base + beam_idx).reshape(-1)
            state = state.select(rows)
            y_prev = tok.reshape(-1)
            scores = new_scores

    results = []
    for b in range(B):
        hyps = [
            Hypothesis(tuple(tokens[b, i, : L[b] + 1].tolist()), float(scores[b, i]), None, True)
            for i in range(k)
            if np.isfinite(scores[b, i])
        ]
        results.append(sorted(hyps, key=lambda h: -h.score))
    return results


def force_decode(
    params: ModelParams,
    src: Sequence[int],
    ref_len: int,
    beam_size: int,
    noise: GumbelConfig | None = None,
) -> list[Hypothesis]:
    return force_decode_batch(params, [src], [ref_len], beam_size, noise)[0]
