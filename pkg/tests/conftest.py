import numpy as np
import pytest

from orseq.data import SentencePair
from orseq.model import ModelDims, init_params
from orseq.numerics import Rng


def random_pairs(rng: np.random.Generator, n: int, src_vocab: int, tgt_vocab: int, max_len: int = 5):
    pairs = []
    for _ in range(n):
        s = rng.integers(4, src_vocab, size=rng.integers(1, max_len + 1))
        t = rng.integers(4, tgt_vocab, size=rng.integers(1, max_len + 1))
        pairs.append(SentencePair(tuple(int(x) for x in s), tuple(int(x) for x in t)))
    return pairs


def sharpen(params, scale: float):
    """Scale the output projection so distributions are far from uniform."""
    params["out.W"].value *= scale
    return params


@pytest.fixture
def tiny_dims():
    return ModelDims(src_vocab=9, tgt_vocab=8, embed=4, hidden=5)


@pytest.fixture
def tiny_params(tiny_dims):
    return init_params(Rng(7), tiny_dims)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
