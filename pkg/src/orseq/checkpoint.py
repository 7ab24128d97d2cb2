"""Plain-text checkpoint container.

Layout (UTF-8, one record per line)::

    ORSEQ-CKPT v1
    config <json>
    state <json>
    vocab src <json list of tokens>
    vocab tgt <json list of tokens>
    array <name> <shape as d1xd2...>
    <row-major values, space separated>
    ...
    end

Floats are written with ``repr`` so they read back bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

from .data import NUM_RESERVED, Vocabulary

HEADER = "ORSEQ-CKPT v1"


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class Checkpoint:
    config: dict[str, Any]
    arrays: dict[str, np.ndarray]
    state: dict[str, Any] = dataclasses.field(default_factory=dict)
    src_vocab: Vocabulary | None = None
    tgt_vocab: Vocabulary | None = None


def _fmt_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write atomically (temp file + rename)."""
    lines = [HEADER, "config " + json.dumps(ckpt.config, sort_keys=True)]
    lines.append("state " + json.dumps(ckpt.state, sort_keys=True))
    for side, vocab in (("src", ckpt.src_vocab), ("tgt", ckpt.tgt_vocab)):
        if vocab is not None:
            lines.append(f"vocab {side} " + json.dumps(vocab.token_of[NUM_RESERVED:], ensure_ascii=False))
    for name, arr in ckpt.arrays.items():
        if " " in name:
            raise CheckpointError(f"array name may not contain spaces: {name!r}")
        a = np.asarray(arr, dtype=np.float64)
        lines.append(f"array {name} {_fmt_shape(a.shape)}")
        lines.append(" ".join(repr(float(v)) for v in a.reshape(-1)))
    lines.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"{path}: not an {HEADER} file")
    ckpt = Checkpoint(config={}, arrays={})
    i = 1
    try:
        while i < len(lines):
            line = lines[i]
            if line == "end":
                return ckpt
            kind, _, rest = line.partition(" ")
            if kind == "config":
                ckpt.config = json.loads(rest)
            elif kind == "state":
                ckpt.state = json.loads(rest)
            elif kind == "vocab":
                side, _, toks = rest.partition(" ")
                vocab = Vocabulary(json.loads(toks))
                if side == "src":
                    ckpt.src_vocab = vocab
                else:
                    ckpt.tgt_vocab = vocab
            elif kind == "array":
                name, shape_txt = rest.split(" ")
                shape = _parse_shape(shape_txt)
                i += 1
                vals = [float(v) for v in lines[i].split()] if lines[i] else []
                if len(vals) != int(np.prod(shape, dtype=np.int64)):
                    raise CheckpointError(
                        f"{path}: array {name} has {len(vals)} values for shape {shape}"
                    )
                ckpt.arrays[name] = np.array(vals, dtype=np.float64).reshape(shape)
            else:
                raise CheckpointError(f"{path}: unexpected record {kind!r} on line {i + 1}")
            i += 1
    except (ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed line {i + 1}: {exc}") from exc
    raise CheckpointError(f"{path}: truncated (no end marker)")
