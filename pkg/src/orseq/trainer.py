"""MLE training with oracle-sampled decoder contexts, validation and checkpoints."""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import BOS, EOS, PAD, SentencePair, Vocabulary, batch_iter
from .gumbel import GumbelConfig
from .metrics import corpus_bleu
from .model import (
    ModelDims,
    ModelParams,
    decoder_step,
    encode,
    init_params,
    initial_state,
    pad_batch,
    param_shapes,
)
from .numerics import Rng, Tensor
from .oracle import OracleMode, sentence_oracle_batch, word_oracle
from .schedule import DecayConfig, sample_context, truth_prob
from .search import beam_search

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "batch", "loss_per_token", "p_truth", "val_bleu", "seconds"]

# rng stream ids under the run seed
STREAM_INIT, STREAM_SHUFFLE, STREAM_STEP = 1, 2, 3
# sub-streams of one training step
SUB_CONTEXT, SUB_WORD_NOISE, SUB_DROPOUT, SUB_SENT_NOISE = 0, 1, 2, 3


@dataclasses.dataclass
class TrainConfig:
    embed: int = 64
    hidden: int = 64
    oracle: str = "none"
    tau: float = 0.5
    mu: float = 12.0
    oracle_beam: int = 3
    epochs: int = 30
    batch_size: int = 80
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    dropout: float = 0.5
    clip: float = 5.0
    seed: int = 1234
    patience: int = 10
    val_beam: int = 10
    max_len: int = 50
    record_time: bool = False

    def __post_init__(self):
        self.mode  # validates the name
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if self.oracle_beam < 1:
            raise ValueError("oracle_beam must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.optimizer not in ("adadelta", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def mode(self) -> OracleMode:
        return OracleMode.parse(self.oracle)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------------------
# loss


@dataclasses.dataclass
class StepOutput:
    loss: Tensor
    n_tokens: int
    contexts: np.ndarray  # (B, T): token fed at each step, PAD past the end
    targets: np.ndarray  # (B, T): token whose log-prob enters the loss, PAD past the end


def _targets(tgts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tgt_ids, lengths = pad_batch(tgts)
    B = len(tgts)
    T = int(lengths.max()) + 1
    targets = np.full((B, T), PAD, dtype=np.int64)
    targets[:, : tgt_ids.shape[1]] = tgt_ids
    targets[np.arange(B), lengths] = EOS
    mask = np.arange(T)[None, :] <= lengths[:, None]
    return targets, mask, lengths


def step_loss(
    params: ModelParams,
    batch: Sequence[SentencePair],
    mode: OracleMode | str = OracleMode.NONE,
    p: float = 1.0,
    rng: Rng | None = None,
    dropout: float = 0.0,
    tau: float = 0.5,
    oracle_beam: int = 3,
    sentence_oracles: Sequence[Sequence[int]] | None = None,
    context_override: np.ndarray | None = None,
) -> StepOutput:
    """Summed negative log-likelihood of the ground truth over a batch.

    The first context is BOS.  Afterwards the fed token at each step is the
    previous ground-truth word with probability ``p`` and the previous oracle
    word otherwise (one draw per sentence per step).  The loss always scores
    the ground-truth token.  Oracle choice and the draw are made on plain
    arrays, so no gradient flows through them.

    ``context_override`` (B, T) forces the fed tokens (column 0 must be BOS);
    oracles and draws are still computed but not used.
    """
    mode = OracleMode.parse(mode) if isinstance(mode, str) else mode
    if any(len(pr.tgt) == 0 for pr in batch):
        raise ValueError("step_loss: empty target")
    if rng is None:
        rng = Rng(0)
    ctx_rng = rng.spawn(SUB_CONTEXT)
    drop_rng = rng.spawn(SUB_DROPOUT)
    word_noise = GumbelConfig(tau, rng.spawn(SUB_WORD_NOISE)) if mode is OracleMode.WORD_NOISE else None

    srcs = [pr.src for pr in batch]
    tgts = [pr.tgt for pr in batch]
    targets, mask, lengths = _targets(tgts)
    B, T = targets.shape

    sent = None
    if mode.is_sentence:
        if sentence_oracles is None:
            noise = GumbelConfig(tau, rng.spawn(SUB_SENT_NOISE)) if mode.noisy else None
            sentence_oracles = [
                o.tokens for o in sentence_oracle_batch(params, srcs, tgts, oracle_beam, noise)
            ]
        sent = np.full((B, T), PAD, dtype=np.int64)
        for b, toks in enumerate(sentence_oracles):
            if len(toks) != lengths[b]:
                raise ValueError("sentence oracle length differs from the reference length")
            sent[b, : len(toks)] = toks

    if context_override is not None:
        context_override = np.asarray(context_override, dtype=np.int64)
        if context_override.shape != (B, T) or np.any(context_override[:, 0] != BOS):
            raise ValueError("context_override must be (B, T) and start with BOS")

    ann = encode(params, srcs)
    state = initial_state(params, ann)
    contexts = np.full((B, T), PAD, dtype=np.int64)
    contexts[:, 0] = BOS
    y_prev = contexts[:, 0] if context_override is None else context_override[:, 0]
    nll = []
    for j in range(T):
        state, logits = decoder_step(params, y_prev, state, ann, dropout, drop_rng if dropout else None)
        nll.append(nx.pick(nx.log_softmax(logits), targets[:, j]))
        if j + 1 == T:
            break
        truth = targets[:, j]
        if mode is OracleMode.NONE:
            nxt = truth.copy()
        else:
            oracle = word_oracle(logits.value, word_noise) if mode.is_word else sent[:, j]
            nxt = sample_context(truth, oracle, p, ctx_rng)
        nxt = np.where(j < lengths, nxt, PAD)
        contexts[:, j + 1] = nxt
        y_prev = nxt if context_override is None else context_override[:, j + 1]
    if context_override is not None:
        contexts = context_override.copy()
    loss = -nx.sum(nx.stack(nll, axis=1) * Tensor(mask.astype(float)))
    return StepOutput(loss, int(mask.sum()), contexts, np.where(mask, targets, PAD))


# ---------------------------------------------------------------------------
# optimizers


class Adadelta:
    """Zeiler's adadelta; accumulators start at zero."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], rho: float = 0.95, eps: float = 1e-6):
        self.rho, self.eps = rho, eps
        self.sq_grad = {k: np.zeros(s) for k, s in shapes.items()}
        self.sq_delta = {k: np.zeros(s) for k, s in shapes.items()}

    def update(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        rho, eps = self.rho, self.eps
        for name, g in grads.items():
            eg = self.sq_grad[name]
            eg *= rho
            eg += (1.0 - rho) * g * g
            ed = self.sq_delta[name]
            delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1.0 - rho) * delta * delta
            arrays[name] += delta

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.sq_grad.{k}": v for k, v in self.sq_grad.items()}
        out.update({f"opt.sq_delta.{k}": v for k, v in self.sq_delta.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.sq_grad:
            self.sq_grad[k] = arrays[f"opt.sq_grad.{k}"].copy()
            self.sq_delta[k] = arrays[f"opt.sq_delta.{k}"].copy()


class SGD:
    def __init__(self, lr: float = 1.0):
        self.lr = lr

    def update(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            arrays[name] -= self.lr * g

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        pass


def adadelta_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: Adadelta,
) -> None:
    opt.update(params, grads)


def make_optimizer(cfg: TrainConfig, shapes: dict[str, tuple[int, ...]]):
    if cfg.optimizer == "adadelta":
        return Adadelta(shapes, cfg.rho, cfg.eps)
    return SGD(cfg.lr)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def collect_grads(params: ModelParams, scale: float = 1.0) -> dict[str, np.ndarray]:
    return {
        name: (t.grad * scale if t.grad is not None else np.zeros_like(t.value))
        for name, t in params.arrays.items()
    }


# ---------------------------------------------------------------------------
# decoding and evaluation


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ORSEQ_THREADS", "1")))
    except ValueError:
        return 1


def strip_eos(tokens: Sequence[int]) -> list[int]:
    out = list(tokens)
    return out[:-1] if out and out[-1] == EOS else out


def translate(
    params: ModelParams, srcs: Sequence[Sequence[int]], beam: int = 10, max_len: int | None = None
) -> list[list[int]]:
    """Best beam hypothesis per source, without EOS; never uses noise or dropout."""

    def one(src):
        return strip_eos(beam_search(params, src, beam, max_len)[0].tokens)

    n = _threads()
    if n == 1:
        return [one(s) for s in srcs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, srcs))


@dataclasses.dataclass
class EvalResult:
    bleu: float
    hypotheses: list[list[int]]


def evaluate(
    params: ModelParams,
    pairs: Sequence[SentencePair],
    beam: int = 10,
    hyp_path: str | Path | None = None,
    vocab: Vocabulary | None = None,
) -> EvalResult:
    hyps = translate(params, [p.src for p in pairs], beam)
    bleu = corpus_bleu(hyps, [list(p.tgt) for p in pairs])
    if hyp_path is not None:
        if vocab is None:
            raise ValueError("writing hypotheses needs the target vocabulary")
        write_hypotheses(hyp_path, hyps, vocab)
    return EvalResult(bleu, hyps)


def write_hypotheses(path: str | Path, hyps: Sequence[Sequence[int]], vocab: Vocabulary) -> None:
    Path(path).write_text(
        "".join(" ".join(vocab.decode(h)) + "\n" for h in hyps), encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# training loop


def params_from_arrays(dims: ModelDims, arrays: dict[str, np.ndarray]) -> ModelParams:
    return ModelParams(dims, {k: nx.parameter(arrays[k]) for k in _param_names(dims)})


def _param_names(dims: ModelDims) -> list[str]:
    return list(param_shapes(dims))


def dims_for(cfg: TrainConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ModelDims:
    return ModelDims(len(src_vocab), len(tgt_vocab), cfg.embed, cfg.hidden)


def load_model(path: str | Path) -> tuple[ModelParams, TrainConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.src_vocab is None or ckpt.tgt_vocab is None:
        raise CheckpointError(f"{path}: checkpoint has no vocabularies")
    cfg = TrainConfig.from_dict(ckpt.config)
    dims = dims_for(cfg, ckpt.src_vocab, ckpt.tgt_vocab)
    try:
        params = params_from_arrays(dims, ckpt.arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from exc
    return params, cfg, ckpt


@dataclasses.dataclass
class TrainResult:
    best_bleu: float
    best_epoch: int
    epochs_run: int
    params: ModelParams


def _metrics_row(epoch, batch, loss_per_token, p, val_bleu, seconds) -> list[str]:
    return [
        str(epoch),
        str(batch),
        repr(float(loss_per_token)),
        repr(float(p)),
        "" if val_bleu is None else repr(float(val_bleu)),
        "" if seconds is None else f"{seconds:.3f}",
    ]


def train_batch(
    params: ModelParams,
    opt,
    batch: Sequence[SentencePair],
    cfg: TrainConfig,
    p: float,
    rng: Rng,
) -> tuple[float, int]:
    """One update; returns (summed loss, token count)."""
    params.zero_grad()
    out = step_loss(params, batch, cfg.mode, p, rng, cfg.dropout, cfg.tau, cfg.oracle_beam)
    total = nx.backward(out.loss)
    grads = collect_grads(params, 1.0 / len(batch))
    params.zero_grad()
    clip_by_global_norm(grads, cfg.clip)
    opt.update({k: t.value for k, t in params.arrays.items()}, grads)
    return total, out.n_tokens


def train(
    cfg: TrainConfig,
    train_pairs: Sequence[SentencePair],
    valid_pairs: Sequence[SentencePair],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    out_dir: str | Path,
    resume: bool = False,
    on_epoch: Callable[[int, float | None], None] | None = None,
) -> TrainResult:
    """Train and keep the best-validation-BLEU checkpoint.

    Writes ``metrics.csv``, ``timing.csv``, ``best.ckpt`` and ``last.ckpt``
    under ``out_dir``.  With ``resume`` training continues after the epoch
    stored in ``last.ckpt``.  Every random draw is keyed by
    (seed, epoch, batch), so a resumed run matches an uninterrupted one.
    """
    if not train_pairs:
        raise ValueError("no training pairs")
    if not valid_pairs:
        raise ValueError("no validation pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"

    dims = dims_for(cfg, src_vocab, tgt_vocab)
    root = Rng(cfg.seed)
    params = init_params(root.spawn(STREAM_INIT), dims)
    shapes = {k: t.shape for k, t in params.arrays.items()}
    opt = make_optimizer(cfg, shapes)
    start_epoch, best_bleu, best_epoch, bad = 0, -1.0, -1, 0

    if resume:
        params, saved_cfg, ckpt = load_model(last_path)
        # only the epoch budget may change on resume
        if dataclasses.replace(saved_cfg, epochs=cfg.epochs) != cfg:
            raise CheckpointError(f"{last_path}: stored config differs from the requested one")
        opt.load_state(ckpt.arrays)
        start_epoch = ckpt.state["epoch"] + 1
        best_bleu, best_epoch, bad = ckpt.state["best_bleu"], ckpt.state["best_epoch"], ckpt.state["bad_epochs"]
        _truncate_metrics(metrics_path, ckpt.state["epoch"])
        _truncate_metrics(timing_path, ckpt.state["epoch"])
    else:
        for path, header in ((metrics_path, METRICS_HEADER), (timing_path, ["epoch", "batch", "seconds"])):
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(header)

    epochs_run = start_epoch
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        if bad >= cfg.patience:
            break
        p = 1.0 if cfg.mode is OracleMode.NONE else truth_prob(DecayConfig(cfg.mu, epoch))
        rows, timing = [], []
        batches = list(batch_iter(train_pairs, cfg.batch_size, root.spawn(STREAM_SHUFFLE), epoch))
        for bi, batch in enumerate(batches):
            loss_sum, n_tok = train_batch(params, opt, batch, cfg, p, root.spawn(STREAM_STEP, epoch, bi))
            elapsed = time.perf_counter() - t0
            rows.append([epoch, bi, loss_sum / n_tok, p, None, elapsed])
            timing.append([epoch, bi, f"{elapsed:.3f}"])
        val = evaluate(params, valid_pairs, cfg.val_beam).bleu
        rows[-1][4] = val
        with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in rows:
                w.writerow(_metrics_row(*r[:5], r[5] if cfg.record_time else None))
        with open(timing_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(timing)

        if val > best_bleu:
            best_bleu, best_epoch, bad = val, epoch, 0
            _save(best_path, cfg, params, None, src_vocab, tgt_vocab, {"epoch": epoch, "val_bleu": val})
        else:
            bad += 1
        state = {"epoch": epoch, "best_bleu": best_bleu, "best_epoch": best_epoch, "bad_epochs": bad}
        _save(last_path, cfg, params, opt, src_vocab, tgt_vocab, state)
        epochs_run = epoch + 1
        log.info("epoch %d p=%.4f loss/tok=%.4f val_bleu=%.4f", epoch, p, rows[-1][2], val)
        if on_epoch is not None:
            on_epoch(epoch, val)
    return TrainResult(best_bleu, best_epoch, epochs_run, params)


def _save(path, cfg, params, opt, src_vocab, tgt_vocab, state) -> None:
    arrays = {k: t.value for k, t in params.arrays.items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    save_checkpoint(path, Checkpoint(cfg.to_dict(), arrays, state, src_vocab, tgt_vocab))


def _truncate_metrics(path: Path, last_epoch: int) -> None:
    """Drop rows written after ``last_epoch`` (an interrupted epoch)."""
    if not path.exists():
        raise CheckpointError(f"cannot resume: {path} is missing")
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= last_epoch]
    path.write_text("".join(kept), encoding="utf-8")


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    """Parse a metrics CSV into typed rows (``val_bleu``/``seconds`` may be None)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "epoch": int(r["epoch"]),
                    "batch": int(r["batch"]),
                    "loss_per_token": float(r["loss_per_token"]),
                    "p_truth": float(r["p_truth"]),
                    "val_bleu": float(r["val_bleu"]) if r["val_bleu"] else None,
                    "seconds": float(r["seconds"]) if r["seconds"] else None,
                }
            )
    return rows


def epoch_curves(rows: Sequence[dict[str, Any]]) -> tuple[list[int], list[float], list[float]]:
    """(epochs, mean per-token batch loss per epoch, validation BLEU per epoch)."""
    epochs = sorted({r["epoch"] for r in rows})
    loss = [float(np.mean([r["loss_per_token"] for r in rows if r["epoch"] == e])) for e in epochs]
    bleu = [next(r["val_bleu"] for r in rows if r["epoch"] == e and r["val_bleu"] is not None) for e in epochs]
    return epochs, loss, bleu


def dump_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
