"""Vocabularies, parallel corpora, batching and synthetic translation tasks."""

from __future__ import annotations

import dataclasses
from collections import Counter
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import yaml

from .numerics import Rng

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
NUM_RESERVED = len(SPECIALS)
DEFAULT_MAX_LEN = 50


class CorpusError(ValueError):
    pass


class Vocabulary:
    """Token <-> id map with PAD=0, UNK=1, BOS=2, EOS=3 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.token_of: list[str] = list(SPECIALS)
        self.id_of: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            if tok in self.id_of:
                raise ValueError(f"duplicate vocabulary entry {tok!r}")
            self.id_of[tok] = len(self.token_of)
            self.token_of.append(tok)

    def __len__(self) -> int:
        return len(self.token_of)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.token_of == other.token_of

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id_of.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_eos and i == EOS:
                break
            out.append(self.token_of[i])
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.token_of) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        try:
            lines = Path(path).read_text(encoding="utf-8").split("\n")
        except OSError as exc:
            raise CorpusError(f"cannot read vocabulary {path}: {exc}") from exc
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:NUM_RESERVED]) != SPECIALS:
            raise CorpusError(f"{path}: missing reserved header {SPECIALS}")
        return cls(lines[NUM_RESERVED:])


def read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def vocab_from_sentences(
    sentences: Iterable[Sequence[str]], max_size: int | None = None, min_freq: int = 1
) -> Vocabulary:
    """Most frequent tokens first, ties broken by first occurrence."""
    counts: Counter[str] = Counter()
    first: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            counts[tok] += 1
            first.setdefault(tok, len(first))
    ranked = sorted((t for t in counts if counts[t] >= min_freq), key=lambda t: (-counts[t], first[t]))
    if max_size is not None:
        if max_size < NUM_RESERVED:
            raise ValueError(f"max_size must be >= {NUM_RESERVED}")
        ranked = ranked[: max_size - NUM_RESERVED]
    return Vocabulary(ranked)


def build_vocab(path: str | Path, max_size: int | None = 30000, min_freq: int = 1) -> Vocabulary:
    lines = read_lines(path)
    sents = [ln.split() for ln in lines]
    if not any(sents):
        raise CorpusError(f"{path}: corpus is empty")
    return vocab_from_sentences(sents, max_size, min_freq)


def encode_sentence(vocab: Vocabulary, line: str) -> list[int]:
    return vocab.encode(line.split())


@dataclasses.dataclass(frozen=True)
class SentencePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]


def load_parallel(
    src_path: str | Path,
    tgt_path: str | Path,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    max_len: int | None = DEFAULT_MAX_LEN,
) -> list[SentencePair]:
    """Line-aligned corpora to id pairs; empty or over-long pairs are dropped."""
    src_lines, tgt_lines = read_lines(src_path), read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}"
        )
    return make_pairs(
        [encode_sentence(src_vocab, ln) for ln in src_lines],
        [encode_sentence(tgt_vocab, ln) for ln in tgt_lines],
        max_len,
    )


def make_pairs(
    srcs: Sequence[Sequence[int]], tgts: Sequence[Sequence[int]], max_len: int | None = DEFAULT_MAX_LEN
) -> list[SentencePair]:
    pairs = []
    for s, t in zip(srcs, tgts):
        if not s or not t:
            continue
        if max_len is not None and (len(s) > max_len or len(t) > max_len):
            continue
        pairs.append(SentencePair(tuple(s), tuple(t)))
    return pairs


def batch_iter(
    pairs: Sequence[SentencePair], batch_size: int, rng: Rng, epoch: int
) -> Iterator[list[SentencePair]]:
    """Shuffle with a stream keyed on ``epoch`` and yield contiguous chunks."""
    if not pairs:
        raise ValueError("batch_iter: no pairs")
    order = rng.spawn(epoch).permutation(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        yield [pairs[i] for i in order[lo : lo + batch_size]]


# ---------------------------------------------------------------------------
# synthetic tasks

TASKS = ("copy", "reverse", "cipher")


@dataclasses.dataclass
class SyntheticSpec:
    vocab_size: int = 20
    min_len: int = 3
    max_len: int = 10
    task: str = "copy"
    pairs: int = 2000
    swap_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    @classmethod
    def load(cls, path: str | Path) -> SyntheticSpec:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)


def _word(i: int) -> str:
    return f"w{i}"


def gen_synthetic(rng: Rng, spec: SyntheticSpec) -> tuple[list[list[str]], list[list[str]]]:
    """Source/target token lists where target = task(source).

    ``cipher`` maps each word through a fixed random permutation of the
    vocabulary, then swaps each adjacent pair (left to right, non-overlapping)
    with probability ``swap_prob``.
    """
    cipher = rng.spawn(0).permutation(spec.vocab_size)
    draw = rng.spawn(1)
    swaps = rng.spawn(2)  # separate stream: sentences do not depend on swap_prob
    srcs, tgts = [], []
    for _ in range(spec.pairs):
        n = int(draw.integers(spec.min_len, spec.max_len + 1))
        src = [int(v) for v in draw.integers(0, spec.vocab_size, size=n)]
        if spec.task == "copy":
            tgt = list(src)
        elif spec.task == "reverse":
            tgt = src[::-1]
        else:
            tgt = [int(cipher[v]) for v in src]
            i = 0
            while i < len(tgt) - 1:
                if spec.swap_prob > 0 and swaps.uniform() < spec.swap_prob:
                    tgt[i], tgt[i + 1] = tgt[i + 1], tgt[i]
                    i += 2
                else:
                    i += 1
        srcs.append([_word(v) for v in src])
        tgts.append([_word(v) for v in tgt])
    return srcs, tgts


def write_corpus(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")
