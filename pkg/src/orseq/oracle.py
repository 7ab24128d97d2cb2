"""Word-level and sentence-level oracle selection."""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np

from .gumbel import GumbelConfig, gumbel_noise, perturb, perturbed_logits  # noqa: F401
from .metrics import sentence_bleu
from .model import ModelParams
from .search import Hypothesis, force_decode_batch
from .data import EOS

DEFAULT_TAU = 0.5
DEFAULT_ORACLE_BEAM = 3


class OracleMode(str, enum.Enum):
    NONE = "none"
    WORD = "word"
    WORD_NOISE = "word-noise"
    SENTENCE = "sentence"
    SENTENCE_NOISE = "sentence-noise"

    @property
    def is_word(self) -> bool:
        return self in (OracleMode.WORD, OracleMode.WORD_NOISE)

    @property
    def is_sentence(self) -> bool:
        return self in (OracleMode.SENTENCE, OracleMode.SENTENCE_NOISE)

    @property
    def noisy(self) -> bool:
        return self in (OracleMode.WORD_NOISE, OracleMode.SENTENCE_NOISE)

    @classmethod
    def parse(cls, name: str) -> OracleMode:
        try:
            return cls(name.replace("+", "-"))
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown oracle mode {name!r} (expected one of: {valid})") from None


@dataclasses.dataclass
class OracleSelection:
    """Oracle tokens for one ground-truth target.

    For sentence modes ``tokens`` has exactly ``len(reference)`` entries.  Word
    modes pick their tokens during the training pass, so ``tokens`` is empty.
    ``candidates`` and ``bleus`` keep the reranked pool for inspection.
    """

    mode: OracleMode
    tokens: tuple[int, ...] = ()
    candidates: list[Hypothesis] = dataclasses.field(default_factory=list)
    bleus: list[float] = dataclasses.field(default_factory=list)
    best: int = -1


def word_oracle(logits, noise: GumbelConfig | None = None) -> np.ndarray | int:
    """argmax of P, or of the perturbed P~ when ``noise`` is given.

    Works on a single logit vector (returns an int) or on a (B, V) batch.
    np.argmax returns the first maximum, so ties go to the lowest id.
    """
    o = np.asarray(logits, dtype=np.float64)
    if noise is not None:
        o = perturbed_logits(o, noise)
    idx = np.argmax(o, axis=-1)
    return int(idx) if o.ndim == 1 else idx


def rerank(candidates: Sequence[Hypothesis], reference: Sequence[int]) -> tuple[int, list[float]]:
    """Index of the best candidate by smoothed sentence BLEU against ``reference``.

    EOS is stripped before scoring.  Ties go to the higher model score, then
    to the earlier candidate.
    """
    bleus = [sentence_bleu(_strip_eos(c.tokens), reference) for c in candidates]
    best = min(range(len(candidates)), key=lambda i: (-bleus[i], -candidates[i].score, i))
    return best, bleus


def _strip_eos(tokens: Sequence[int]) -> tuple[int, ...]:
    toks = tuple(tokens)
    return toks[:-1] if toks and toks[-1] == EOS else toks


def sentence_oracle_batch(
    params: ModelParams,
    srcs: Sequence[Sequence[int]],
    refs: Sequence[Sequence[int]],
    beam_size: int = DEFAULT_ORACLE_BEAM,
    noise: GumbelConfig | None = None,
) -> list[OracleSelection]:
    """Force-decode each source to its reference length and keep the best-BLEU candidate.

    Runs without a graph or dropout, so the oracles carry no gradient.
    """
    if any(len(r) == 0 for r in refs):
        raise ValueError("sentence_oracle: empty reference")
    mode = OracleMode.SENTENCE_NOISE if noise is not None else OracleMode.SENTENCE
    pools = force_decode_batch(params, srcs, [len(r) for r in refs], beam_size, noise)
    out = []
    for pool, ref in zip(pools, refs):
        best, bleus = rerank(pool, ref)
        out.append(OracleSelection(mode, _strip_eos(pool[best].tokens), list(pool), bleus, best))
    return out


def sentence_oracle(
    params: ModelParams,
    src: Sequence[int],
    ref: Sequence[int],
    beam_size: int = DEFAULT_ORACLE_BEAM,
    noise: GumbelConfig | None = None,
) -> OracleSelection:
    return sentence_oracle_batch(params, [src], [ref], beam_size, noise)[0]
