"""Attention encoder-decoder with a bidirectional GRU encoder and a two-GRU decoder.

All functions work on a batch of sentences at once; a single sentence is a
batch of one.  Padded source positions are masked out of the encoder
recurrence and the attention softmax, so each row's result depends only on its
own sentence.

Decoder step j::

    s~_j = GRU1(e[y_{j-1}], s_{j-1})
    alpha_j, c_j = attention(s~_j, h)
    s_j  = GRU2(c_j, s~_j)
    t_j  = tanh(L [e[y_{j-1}]; c_j; s_j] + b)      (dropout on t_j when training)
    o_j  = t_j W_o
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import BOS, PAD
from .numerics import Rng, Tensor

INIT_SCALE = 0.1


@dataclasses.dataclass(frozen=True)
class ModelDims:
    src_vocab: int
    tgt_vocab: int
    embed: int = 64
    hidden: int = 64

    def __post_init__(self):
        for name in ("src_vocab", "tgt_vocab", "embed", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    E, H, A = dims.embed, dims.hidden, dims.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "src_embed": (dims.src_vocab, E),
        "tgt_embed": (dims.tgt_vocab, E),
    }

    def gru(prefix: str, n_in: int) -> None:
        shapes[f"{prefix}.W"] = (n_in, 3 * H)
        shapes[f"{prefix}.U"] = (H, 2 * H)
        shapes[f"{prefix}.Uh"] = (H, H)
        shapes[f"{prefix}.b"] = (3 * H,)

    gru("enc_fwd", E)
    gru("enc_bwd", E)
    shapes["init.W"] = (2 * H, H)
    shapes["init.b"] = (H,)
    shapes["att.W"] = (H, A)
    shapes["att.U"] = (2 * H, A)
    shapes["att.v"] = (A,)
    gru("dec1", E)
    gru("dec2", 2 * H)
    shapes["readout.W"] = (E + 2 * H + H, E)
    shapes["readout.b"] = (E,)
    shapes["out.W"] = (E, dims.tgt_vocab)
    return shapes


class ModelParams:
    """Named learnable arrays plus the dimensions they were built for."""

    def __init__(self, dims: ModelDims, arrays: dict[str, Tensor]):
        expected = param_shapes(dims)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise nx.ShapeError(f"param {name}", arrays[name].shape, shape)
        self.dims = dims
        self.arrays = arrays

    def __getitem__(self, name: str) -> Tensor:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self) -> list[Tensor]:
        return list(self.arrays.values())

    def zero_grad(self) -> None:
        for t in self.arrays.values():
            t.zero_grad()

    def copy(self) -> ModelParams:
        return ModelParams(
            self.dims, {k: nx.parameter(v.value.copy()) for k, v in self.arrays.items()}
        )


def init_params(rng: Rng, dims: ModelDims) -> ModelParams:
    """Every value drawn from U(-0.1, 0.1), in a fixed name order."""
    arrays = {}
    for name, shape in param_shapes(dims).items():
        arrays[name] = nx.parameter(rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape))
    return ModelParams(dims, arrays)


# ---------------------------------------------------------------------------
# building blocks


def gru_step(params: ModelParams, prefix: str, x_proj: Tensor, h: Tensor) -> Tensor:
    """One GRU update given the precomputed input projection ``x W + b``."""
    return nx.gru_cell(x_proj, h, params[f"{prefix}.U"], params[f"{prefix}.Uh"])


def gru_step_unfused(params: ModelParams, prefix: str, x_proj: Tensor, h: Tensor) -> Tensor:
    """``gru_step`` spelled out in elementary ops (reference for tests)."""
    H = h.shape[-1]
    hu = h @ params[f"{prefix}.U"]
    z = nx.sigmoid(x_proj[..., :H] + hu[..., :H])
    r = nx.sigmoid(x_proj[..., H : 2 * H] + hu[..., H:])
    n = nx.tanh(x_proj[..., 2 * H :] + (r * h) @ params[f"{prefix}.Uh"])
    return h + z * (n - h)


def input_projection(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


@dataclasses.dataclass
class Annotations:
    """Encoder output for a batch.

    ``h`` is (B, S, 2H); row b's first ``lengths[b]`` positions are real.
    ``keys`` caches ``h U_a`` for attention.
    """

    h: Tensor
    mask: np.ndarray
    lengths: np.ndarray
    keys: Tensor
    score_bias: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.h.shape[0]

    def repeat(self, k: int) -> Annotations:
        """Each row repeated ``k`` times (row b -> rows b*k .. b*k+k-1); no gradient."""
        rep = lambda a: np.repeat(a, k, axis=0)  # noqa: E731
        return Annotations(
            Tensor(rep(self.h.value)),
            rep(self.mask),
            rep(self.lengths),
            Tensor(rep(self.keys.value)),
            rep(self.score_bias),
        )


@dataclasses.dataclass
class DecoderState:
    s: Tensor
    s_tilde: Tensor | None = None

    def select(self, rows: np.ndarray) -> DecoderState:
        return DecoderState(
            Tensor(self.s.value[rows]),
            None if self.s_tilde is None else Tensor(self.s_tilde.value[rows]),
        )


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("empty sequence in batch")
    ids = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _check_ids(ids: np.ndarray, vocab: int, what: str) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"{what}: token id out of range [0, {vocab}) (map unknown words to UNK)")


def encode(params: ModelParams, srcs: Sequence[Sequence[int]]) -> Annotations:
    """Bidirectional GRU annotations for a batch of source id sequences."""
    ids, lengths = pad_batch(srcs)
    _check_ids(ids, params.dims.src_vocab, "encode")
    B, S = ids.shape
    H = params.dims.hidden
    mask = np.arange(S)[None, :] < lengths[:, None]
    emb = nx.embedding(params["src_embed"], ids)
    proj_f = input_projection(params, "enc_fwd", emb)
    proj_b = input_projection(params, "enc_bwd", emb)
    zeros = Tensor(np.zeros((B, H)))

    fwd: list[Tensor] = []
    h = zeros
    for i in range(S):
        new = gru_step(params, "enc_fwd", proj_f[:, i], h)
        m = mask[:, i : i + 1].astype(float)
        h = new if m.all() else h + Tensor(m) * (new - h)
        fwd.append(h)
    bwd: list[Tensor] = [zeros] * S
    h = zeros
    for i in reversed(range(S)):
        new = gru_step(params, "enc_bwd", proj_b[:, i], h)
        m = mask[:, i : i + 1].astype(float)
        h = new if m.all() else h + Tensor(m) * (new - h)
        bwd[i] = h
    ann = nx.stack([nx.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=1)
    keys = ann @ params["att.U"]
    score_bias = np.where(mask, 0.0, -np.inf)
    return Annotations(ann, mask, lengths, keys, score_bias)


def initial_state(params: ModelParams, ann: Annotations) -> DecoderState:
    """s_0 = tanh(mean_i(h_i) W_init + b_init) over the real source positions."""
    m = Tensor((ann.mask / ann.lengths[:, None])[..., None])
    mean = nx.sum(ann.h * m, axis=1)
    return DecoderState(nx.tanh(mean @ params["init.W"] + params["init.b"]))


def attention(params: ModelParams, query: Tensor, ann: Annotations) -> tuple[Tensor, Tensor]:
    """Additive attention: (alpha (B, S), context (B, 2H)); alpha carries no gradient."""
    ctx, alpha = nx.additive_attention(
        query, params["att.W"], ann.keys, params["att.v"], ann.h, ann.score_bias
    )
    return Tensor(alpha), ctx


def attention_unfused(params: ModelParams, query: Tensor, ann: Annotations) -> tuple[Tensor, Tensor]:
    """``attention`` spelled out in elementary ops (reference for tests)."""
    B, S, A = ann.keys.shape
    q = nx.reshape(query @ params["att.W"], (B, 1, A))
    scores = nx.tanh(ann.keys + q) @ params["att.v"]
    alpha = nx.softmax(scores + Tensor(ann.score_bias), axis=-1)
    ctx = nx.sum(nx.reshape(alpha, (B, S, 1)) * ann.h, axis=1)
    return alpha, ctx


def decoder_step(
    params: ModelParams,
    y_prev: np.ndarray | Sequence[int],
    state: DecoderState,
    ann: Annotations,
    dropout: float = 0.0,
    rng: Rng | None = None,
) -> tuple[DecoderState, Tensor]:
    """Advance every row one target step; returns the new state and logits (B, V)."""
    y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1)
    _check_ids(y_prev, params.dims.tgt_vocab, "decoder_step")
    if y_prev.shape[0] != state.s.shape[0] or ann.batch_size != y_prev.shape[0]:
        raise nx.ShapeError("decoder_step", y_prev.shape, state.s.shape, "batch size")
    emb = nx.embedding(params["tgt_embed"], y_prev)
    s_tilde = gru_step(params, "dec1", input_projection(params, "dec1", emb), state.s)
    _, ctx = attention(params, s_tilde, ann)
    s = gru_step(params, "dec2", input_projection(params, "dec2", ctx), s_tilde)
    t = nx.tanh(nx.concat([emb, ctx, s], axis=-1) @ params["readout.W"] + params["readout.b"])
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        keep = (rng.uniform(0.0, 1.0, size=t.shape) >= dropout) / (1.0 - dropout)
        t = t * Tensor(keep)
    logits = t @ params["out.W"]
    return DecoderState(s, s_tilde), logits


def teacher_forced_logits(
    params: ModelParams, srcs: Sequence[Sequence[int]], contexts: Sequence[Sequence[int]]
) -> list[Tensor]:
    """Logits at every step when feeding ``contexts`` (each starts with BOS)."""
    ann = encode(params, srcs)
    state = initial_state(params, ann)
    ctx_ids, _ = pad_batch(contexts)
    out = []
    for j in range(ctx_ids.shape[1]):
        state, logits = decoder_step(params, ctx_ids[:, j], state, ann)
        out.append(logits)
    return out


def sequence_log_prob(params: ModelParams, src: Sequence[int], tgt: Sequence[int]) -> float:
    """log P(tgt | src) under teacher forcing, ``tgt`` including any final EOS."""
    with nx.no_grad():
        logits = teacher_forced_logits(params, [src], [[BOS, *tgt[:-1]]])
    return float(
        sum(nx.log_softmax_array(lg.value[0])[y] for lg, y in zip(logits, tgt))
    )
