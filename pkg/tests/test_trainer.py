import math

import numpy as np
import pytest

from orseq import numerics as nx
from orseq.data import BOS, EOS, PAD, SentencePair, Vocabulary
from orseq.model import ModelDims, init_params
from orseq.numerics import Rng
from orseq.trainer import (
    Adadelta,
    TrainConfig,
    clip_by_global_norm,
    collect_grads,
    epoch_curves,
    evaluate,
    load_model,
    read_metrics,
    step_loss,
    train,
    train_batch,
    make_optimizer,
)

from conftest import random_pairs


def _params(seed=0, V=8):
    return init_params(Rng(seed), ModelDims(src_vocab=9, tgt_vocab=V, embed=4, hidden=5))


def test_uniform_model_loss():
    params = _params()
    params["out.W"].value[...] = 0.0
    out = step_loss(params, [SentencePair((4, 5), (5, 6, 7))])
    assert out.n_tokens == 4
    assert out.loss.value == pytest.approx(4 * math.log(8), abs=1e-12)
    assert out.targets.tolist() == [[5, 6, 7, EOS]]
    assert out.contexts.tolist() == [[BOS, 5, 6, 7]]


def test_padding_rows_do_not_contribute():
    params = _params()
    a, b = SentencePair((4,), (5, 6, 7, 4)), SentencePair((6, 7), (5,))
    both = step_loss(params, [a, b]).loss.value
    assert both == pytest.approx(step_loss(params, [a]).loss.value + step_loss(params, [b]).loss.value, abs=1e-12)


def test_batched_gradients_are_sum_of_singles():
    params = _params(3)
    batch = random_pairs(np.random.default_rng(0), 4, 9, 8)
    params.zero_grad()
    nx.backward(step_loss(params, batch).loss)
    together = collect_grads(params)
    summed = {k: np.zeros_like(v) for k, v in together.items()}
    for pr in batch:
        params.zero_grad()
        nx.backward(step_loss(params, [pr]).loss)
        for k, g in collect_grads(params).items():
            summed[k] += g
    for k in together:
        np.testing.assert_allclose(together[k], summed[k], atol=1e-12)


@pytest.mark.parametrize("mode", ["word", "word-noise", "sentence", "sentence-noise"])
def test_truth_only_feed_equals_teacher_forcing(mode):
    params = _params(1)
    batch = random_pairs(np.random.default_rng(1), 3, 9, 8)
    base = step_loss(params, batch, "none", 1.0, Rng(5))
    got = step_loss(params, batch, mode, 1.0, Rng(5))
    assert got.loss.value == base.loss.value
    np.testing.assert_array_equal(got.contexts, base.contexts)


def test_sentence_oracle_feed_at_p_zero():
    params = _params(2)
    batch = [SentencePair((4, 5), (5, 6, 7)), SentencePair((6,), (4, 4))]
    oracles = [(7, 7, 6), (5, 6)]
    out = step_loss(params, batch, "sentence", 0.0, Rng(0), sentence_oracles=oracles)
    assert out.contexts.tolist() == [[BOS, 7, 7, 6], [BOS, 5, 6, PAD]]
    assert out.targets.tolist() == [[5, 6, 7, EOS], [4, 4, EOS, PAD]]


def test_sentence_oracle_length_enforced():
    with pytest.raises(ValueError):
        step_loss(_params(), [SentencePair((4,), (5, 6))], "sentence", 0.0, Rng(0), sentence_oracles=[(5,)])


@pytest.mark.parametrize("mode", ["word-noise", "sentence-noise"])
def test_loss_independent_of_noise_given_contexts(mode):
    params = _params(4)
    batch = random_pairs(np.random.default_rng(4), 3, 9, 8)
    first = step_loss(params, batch, mode, 0.3, Rng(0))
    fixed = first.contexts
    losses = {
        step_loss(params, batch, mode, 0.3, Rng(seed), context_override=fixed).loss.value.item()
        for seed in range(10)
    }
    assert losses == {first.loss.value.item()}


def test_context_override_validated():
    batch = [SentencePair((4,), (5, 6))]
    with pytest.raises(ValueError):
        step_loss(_params(), batch, context_override=np.array([[5, 5, 6]]))


def test_empty_target_rejected():
    with pytest.raises(ValueError):
        step_loss(_params(), [SentencePair((4,), ())])


# --- optimizer ----------------------------------------------------------------


def test_adadelta_first_step_by_hand():
    opt = Adadelta({"x": (1,)}, rho=0.95, eps=1e-6)
    x = {"x": np.array([1.0])}
    opt.update(x, {"x": np.array([2.0])})
    eg = 0.05 * 4.0
    delta = -math.sqrt(1e-6) / math.sqrt(eg + 1e-6) * 2.0
    assert x["x"][0] == pytest.approx(1.0 + delta, abs=1e-15)
    assert opt.sq_delta["x"][0] == pytest.approx(0.05 * delta * delta, abs=1e-20)


def test_adadelta_descends_quadratic():
    opt = Adadelta({"x": (2,)})
    x = {"x": np.array([3.0, -2.0])}
    start = float(np.sum(x["x"] ** 2))
    for _ in range(3000):
        opt.update(x, {"x": 2.0 * x["x"]})
    assert float(np.sum(x["x"] ** 2)) < 0.01 * start


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_by_global_norm(g, 1.0)
    assert g["a"][0] == 0.3


def test_train_batch_uses_mean_gradient():
    cfg = TrainConfig(embed=4, hidden=5, optimizer="sgd", lr=1.0, dropout=0.0, clip=0.0)
    params = _params(5)
    batch = random_pairs(np.random.default_rng(5), 3, 9, 8)
    ref = params.copy()
    ref.zero_grad()
    nx.backward(step_loss(ref, batch).loss)
    expected = {k: t.value - t.grad / 3 for k, t in ref.arrays.items()}
    train_batch(params, make_optimizer(cfg, {}), batch, cfg, 1.0, Rng(0))
    for k, v in expected.items():
        np.testing.assert_allclose(params[k].value, v, atol=1e-14)


def test_config_validation_and_dict_roundtrip():
    cfg = TrainConfig(oracle="sentence-noise", tau=0.7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"oracle": "x"}, {"tau": 0}, {"dropout": 1.0}, {"optimizer": "adam"}, {"mu": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"hiddn": 3})


# --- full loop ------------------------------------------------------------------


def _copy_data(n, seed):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        s = tuple(int(x) for x in rng.integers(4, 10, size=rng.integers(2, 5)))
        pairs.append(SentencePair(s, s))
    return pairs


VOCAB = Vocabulary([f"w{i}" for i in range(6)])


def _cfg(**kw):
    base = dict(embed=8, hidden=8, epochs=3, batch_size=8, dropout=0.1, val_beam=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("mode", ["none", "word-noise", "sentence-noise"])
def test_identical_runs_identical_files(tmp_path, mode):
    tr, va = _copy_data(24, 0), _copy_data(6, 1)
    for d in ("a", "b"):
        train(_cfg(oracle=mode), tr, va, VOCAB, VOCAB, tmp_path / d)
    for name in ("metrics.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    tr, va = _copy_data(24, 0), _copy_data(6, 1)
    train(_cfg(oracle="word-noise", epochs=3), tr, va, VOCAB, VOCAB, tmp_path / "full")
    train(_cfg(oracle="word-noise", epochs=2), tr, va, VOCAB, VOCAB, tmp_path / "part")
    train(_cfg(oracle="word-noise", epochs=3), tr, va, VOCAB, VOCAB, tmp_path / "part", resume=True)
    for name in ("metrics.csv", "last.ckpt"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_resume_rejects_changed_config(tmp_path):
    tr, va = _copy_data(16, 0), _copy_data(4, 1)
    train(_cfg(epochs=1), tr, va, VOCAB, VOCAB, tmp_path)
    from orseq.checkpoint import CheckpointError

    with pytest.raises(CheckpointError):
        train(_cfg(epochs=2, tau=0.9), tr, va, VOCAB, VOCAB, tmp_path, resume=True)


def test_metrics_rebuild_curves_and_best_checkpoint(tmp_path):
    tr, va = _copy_data(24, 0), _copy_data(6, 1)
    res = train(_cfg(oracle="sentence-noise", mu=2.0), tr, va, VOCAB, VOCAB, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    epochs, loss, bleu = epoch_curves(rows)
    assert epochs == [0, 1, 2] and len(loss) == 3
    assert max(bleu) == res.best_bleu and bleu.index(max(bleu)) == res.best_epoch
    assert all(r["seconds"] is None for r in rows)
    ps = [next(r["p_truth"] for r in rows if r["epoch"] == e) for e in epochs]
    assert ps == sorted(ps, reverse=True) and ps[0] == pytest.approx(2 / 3)
    params, cfg, _ = load_model(tmp_path / "best.ckpt")
    assert cfg.oracle == "sentence-noise"
    assert evaluate(params, va, 2).bleu == pytest.approx(res.best_bleu, abs=1e-15)
    timing = (tmp_path / "timing.csv").read_text().splitlines()
    assert timing[0] == "epoch,batch,seconds" and len(timing) == len(rows) + 1


def test_patience_stops_early(tmp_path):
    tr, va = _copy_data(16, 0), _copy_data(4, 1)
    res = train(_cfg(epochs=6, patience=1, optimizer="sgd", lr=0.0), tr, va, VOCAB, VOCAB, tmp_path)
    assert res.epochs_run == 2


def test_threads_do_not_change_translations(monkeypatch):
    params = _params(6, V=10)
    va = _copy_data(5, 2)[:5]
    va = [SentencePair(tuple(min(t, 8) for t in p.src), p.tgt) for p in va]
    one = evaluate(params, va, 3)
    monkeypatch.setenv("ORSEQ_THREADS", "3")
    assert evaluate(params, va, 3).hypotheses == one.hypotheses
