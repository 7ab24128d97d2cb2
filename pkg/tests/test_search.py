import itertools

import numpy as np
import pytest

from orseq.data import BOS, EOS, NUM_RESERVED, PAD
from orseq.gumbel import GumbelConfig
from orseq.model import ModelDims, init_params, sequence_log_prob
from orseq.numerics import Rng
from orseq.search import (
    beam_search,
    beam_search_steps,
    force_decode,
    force_decode_batch,
    greedy_decode,
)

from conftest import sharpen

# --- table-driven beam search ---------------------------------------------

A, B, C, END = 0, 1, 2, 3


class Prefixes:
    """Minimal decoder state for ``beam_search_steps``: one prefix per row."""

    def __init__(self, rows):
        self.rows = [tuple(r) for r in rows]

    def select(self, idx):
        return Prefixes([self.rows[i] for i in np.asarray(idx)])


# next-word distributions over (A, B, C) for the listed prefixes; every other
# prefix is uniform.  Greedy takes A first and then faces a flat table.
TABLE = {
    (): (0.5, 0.4, 0.1),
    (B,): (0.05, 0.9, 0.05),
    (B, B): (0.9, 0.05, 0.05),
}


def _table_prob(prefix):
    return TABLE.get(tuple(prefix), (1 / 3, 1 / 3, 1 / 3))


def _table_step(state, y_prev):
    rows = [r + (int(y),) if int(y) != BOS else r for r, y in zip(state.rows, y_prev)]
    lp = np.full((len(rows), 4), -np.inf)
    for i, r in enumerate(rows):
        if len(r) < 3:
            lp[i, :3] = np.log(_table_prob(r))
        else:
            lp[i, END] = 0.0
    return Prefixes(rows), lp


def _table_score(seq):
    return sum(np.log(_table_prob(seq[:i])[seq[i]]) for i in range(3))


def _run_table(k):
    return beam_search_steps(_table_step, Prefixes([()]), k, max_len=10, bos=BOS, eos=END)


def test_beam_two_beats_greedy_on_table():
    best = max(itertools.product(range(3), repeat=3), key=_table_score)
    assert best == (B, B, A)
    greedy = _run_table(1)[0]
    beam2 = _run_table(2)[0]
    assert greedy.tokens[0] == A
    assert beam2.tokens == (*best, END)
    assert beam2.score == pytest.approx(_table_score(best), abs=1e-12)
    assert greedy.score < beam2.score


def test_table_beam_scores_sorted_and_finished():
    hyps = _run_table(3)
    assert len(hyps) == 3
    assert all(h.finished and h.tokens[-1] == END for h in hyps)
    assert [h.score for h in hyps] == sorted((h.score for h in hyps), reverse=True)
    for h in hyps:
        assert h.score == pytest.approx(_table_score(h.tokens[:3]), abs=1e-12)


def test_beam_returns_live_hypotheses_when_none_finish():
    hyps = beam_search_steps(_table_step, Prefixes([()]), 2, max_len=2, bos=BOS, eos=END)
    assert hyps and not any(h.finished for h in hyps)
    assert all(len(h.tokens) == 2 for h in hyps)


def test_beam_argument_errors():
    with pytest.raises(ValueError):
        _run_table(0)
    with pytest.raises(ValueError):
        beam_search_steps(_table_step, Prefixes([()]), 2, max_len=0)


# --- model-driven search ----------------------------------------------------


def _model(seed, tgt_vocab=10, scale=6.0):
    dims = ModelDims(src_vocab=10, tgt_vocab=tgt_vocab, embed=4, hidden=5)
    return sharpen(init_params(Rng(seed), dims), scale)


@pytest.mark.parametrize("seed", range(8))
def test_beam_one_equals_greedy(seed):
    params = _model(seed)
    src = [4, 5, 6, 7][: 1 + seed % 4]
    hyp = beam_search(params, src, 1)[0]
    assert list(hyp.tokens) == greedy_decode(params, src)


@pytest.mark.parametrize("seed", range(6))
def test_beam_scores_match_teacher_forcing(seed):
    params = _model(seed)
    src = [9, 4, 6]
    for hyp in beam_search(params, src, 4):
        if hyp.finished:
            assert hyp.score == pytest.approx(sequence_log_prob(params, src, hyp.tokens), abs=1e-10)
        assert PAD not in hyp.tokens and BOS not in hyp.tokens


def test_beam_respects_max_len():
    params = _model(3)
    for hyp in beam_search(params, [4, 5], 3, max_len=2):
        assert len(hyp.tokens) <= 2


def test_beam_noise_reproducible():
    params = _model(1)
    run = lambda s: [h.tokens for h in beam_search(params, [4, 5, 6], 3, noise=GumbelConfig(0.5, Rng(s)))]  # noqa: E731
    assert run(5) == run(5)
    plain = [h.tokens for h in beam_search(params, [4, 5, 6], 3)]
    assert plain == [h.tokens for h in beam_search(params, [4, 5, 6], 3)]


# --- force decoding ---------------------------------------------------------


def _constant_logit_model(order):
    """Model whose logits are (almost exactly) ``order`` at every step."""
    V = len(order)
    params = init_params(Rng(0), ModelDims(src_vocab=8, tgt_vocab=V, embed=3, hidden=3))
    params["readout.W"].value[...] = 0.0
    params["readout.b"].value[...] = 30.0  # tanh -> 1
    params["out.W"].value[...] = np.asarray(order, dtype=float) / 3.0
    return params


def test_eos_first_model_takes_second_best_each_step():
    # EOS ranks first, token 6 second
    order = [0, 0, 0, 9, 1, 2, 5, 3]
    params = _constant_logit_model(order)
    hyp = force_decode(params, [4, 5], 3, 1)[0]
    assert hyp.tokens == (6, 6, 6, EOS)


def test_eos_appended_when_never_preferred():
    order = [0, 0, 0, -5, 1, 2, 5, 3]
    params = _constant_logit_model(order)
    hyps = force_decode(params, [4], 2, 2)
    assert [h.tokens for h in hyps] == [(6, 6, EOS), (6, 7, EOS)]
    assert np.isfinite(hyps[0].score)


def test_force_decode_rejects_tiny_vocab_and_bad_args():
    params = _model(0, tgt_vocab=NUM_RESERVED + 1)
    with pytest.raises(ValueError):
        force_decode(params, [4], 2, 1)
    params = _model(0)
    with pytest.raises(ValueError):
        force_decode(params, [4], 0, 1)
    with pytest.raises(ValueError):
        force_decode(params, [4], 2, 0)
    with pytest.raises(ValueError):
        force_decode_batch(params, [[4], [5]], [2], 1)


def _exhaustive(params, src, L):
    allowed = [t for t in range(params.dims.tgt_vocab) if t not in (PAD, BOS, EOS)]
    scored = []
    for seq in itertools.product(allowed, repeat=L):
        tokens = (*seq, EOS)
        scored.append((sequence_log_prob(params, src, tokens), tokens))
    scored.sort(key=lambda x: -x[0])
    return scored


@pytest.mark.parametrize("seed", range(12))
def test_force_decode_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    V = int(rng.integers(NUM_RESERVED + 2, 7))
    L = int(rng.integers(1, 5))
    params = _model(seed, tgt_vocab=V, scale=3.0)
    src = [int(x) for x in rng.integers(4, 10, size=rng.integers(1, 5))]
    oracle = _exhaustive(params, src, L)
    k = len(oracle)
    got = force_decode(params, src, L, k)
    assert [h.tokens for h in got] == [t for _, t in oracle]
    np.testing.assert_allclose([h.score for h in got], [s for s, _ in oracle], atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_force_decode_structure_with_noise(seed):
    rng = np.random.default_rng(100 + seed)
    params = _model(seed, tgt_vocab=int(rng.integers(6, 12)))
    srcs = [[int(x) for x in rng.integers(4, 10, size=rng.integers(1, 6))] for _ in range(4)]
    lens = [int(x) for x in rng.integers(1, 7, size=4)]
    k = int(rng.integers(1, 5))
    for hyps, L in zip(force_decode_batch(params, srcs, lens, k, GumbelConfig(0.5, Rng(seed))), lens):
        assert len(hyps) == k
        for h in hyps:
            assert len(h.tokens) == L + 1 and h.tokens[-1] == EOS
            assert EOS not in h.tokens[:-1]
            assert PAD not in h.tokens and BOS not in h.tokens
        assert len({h.tokens for h in hyps}) == k


def test_force_decode_batch_equals_single():
    params = _model(4)
    srcs, lens = [[4, 5, 6], [7], [8, 9]], [3, 1, 5]
    batched = force_decode_batch(params, srcs, lens, 3)
    for src, L, hyps in zip(srcs, lens, batched):
        single = force_decode(params, src, L, 3)
        assert [h.tokens for h in hyps] == [h.tokens for h in single]
        np.testing.assert_allclose([h.score for h in hyps], [h.score for h in single], atol=1e-12)


def test_force_decode_noise_reproducible_and_effective():
    params = _model(2)
    run = lambda s: [h.tokens for h in force_decode(params, [4, 5, 6], 6, 3, GumbelConfig(1.0, Rng(s)))]  # noqa: E731
    assert run(1) == run(1)
    assert any(run(s) != run(1) for s in range(2, 8))
