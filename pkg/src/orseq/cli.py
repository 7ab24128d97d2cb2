"""Command-line entry point: ``orseq <command> [options]``.

Commands: build-vocab, gen-data, train, translate, evaluate, oracle-dump.
Errors are reported on stderr with exit status 1; usage errors exit with 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from . import numerics as nx
from .checkpoint import CheckpointError
from .data import (
    BOS,
    CorpusError,
    SyntheticSpec,
    Vocabulary,
    build_vocab,
    encode_sentence,
    gen_synthetic,
    load_parallel,
    read_lines,
    write_corpus,
)
from .gumbel import GumbelConfig
from .metrics import sentence_bleu
from .model import teacher_forced_logits
from .numerics import Rng
from .oracle import DEFAULT_ORACLE_BEAM, DEFAULT_TAU, OracleMode, sentence_oracle, word_oracle
from .trainer import TrainConfig, evaluate, load_model, train, translate, write_hypotheses

log = logging.getLogger("orseq")

MANIFEST = "manifest.json"
DATA_KEYS = ("train_src", "train_tgt", "valid_src", "valid_tgt", "src_vocab", "tgt_vocab")


class UsageError(Exception):
    pass


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# build-vocab / gen-data


def cmd_build_vocab(args: argparse.Namespace) -> int:
    vocab = build_vocab(args.input, args.max_size, args.min_freq)
    vocab.save(args.out)
    print(f"{args.out}: {len(vocab)} entries", file=sys.stderr)
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Write train/valid/test splits of a synthetic task."""
    spec = SyntheticSpec.load(args.config) if args.config else SyntheticSpec()
    overrides = {
        k: getattr(args, k)
        for k in ("vocab_size", "min_len", "max_len", "task", "swap_prob", "seed")
        if getattr(args, k) is not None
    }
    sizes = (args.train, args.valid, args.test)
    spec = dataclasses.replace(spec, pairs=sum(sizes), **overrides)
    srcs, tgts = gen_synthetic(Rng(spec.seed), spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo = 0
    for split, n in zip(("train", "valid", "test"), sizes):
        write_corpus(out / f"{split}.src", srcs[lo : lo + n])
        write_corpus(out / f"{split}.tgt", tgts[lo : lo + n])
        lo += n
    (out / "spec.yaml").write_text(yaml.safe_dump(dataclasses.asdict(spec), sort_keys=True), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# train


def _config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(TrainConfig))


def merge_config(file_values: dict[str, Any], flags: argparse.Namespace) -> tuple[TrainConfig, dict[str, str]]:
    """Defaults < config file < command-line flags."""
    names = {f.name for f in _config_fields()}
    unknown = set(file_values) - names - set(DATA_KEYS)
    if unknown:
        raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
    merged = {k: v for k, v in file_values.items() if k in names}
    data = {k: file_values[k] for k in DATA_KEYS if k in file_values}
    for name in names:
        v = getattr(flags, name, None)
        if v is not None:
            merged[name] = v
    for key in DATA_KEYS:
        v = getattr(flags, key, None)
        if v is not None:
            data[key] = v
    try:
        cfg = TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg, data


def _load_config_file(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _manifest(cfg: TrainConfig, data: dict[str, str], out: Path) -> dict[str, Any]:
    return {
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": data,
        "checksums": {k: sha256(data[k]) for k in sorted(data)},
        "artifacts": {
            name: str(out / name)
            for name in ("metrics.csv", "timing.csv", "best.ckpt", "last.ckpt", "src.vocab", "tgt.vocab")
        },
    }


def cmd_train(args: argparse.Namespace) -> int:
    cfg, data = merge_config(_load_config_file(args.config), args)
    missing = [k for k in DATA_KEYS[:4] if k not in data]
    if missing:
        raise UsageError("missing data paths: " + ", ".join("--" + k.replace("_", "-") for k in missing))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(cfg, data, out)
    man_path = out / MANIFEST
    if args.resume:
        if not man_path.exists():
            raise CheckpointError(f"cannot resume: {man_path} is missing")
        old = json.loads(man_path.read_text(encoding="utf-8"))
        if old.get("checksums") != manifest["checksums"]:
            raise CheckpointError("cannot resume: corpus or vocabulary files changed since the run started")
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    src_vocab = Vocabulary.load(data["src_vocab"]) if "src_vocab" in data else build_vocab(data["train_src"])
    tgt_vocab = Vocabulary.load(data["tgt_vocab"]) if "tgt_vocab" in data else build_vocab(data["train_tgt"])
    src_vocab.save(out / "src.vocab")
    tgt_vocab.save(out / "tgt.vocab")
    tr = load_parallel(data["train_src"], data["train_tgt"], src_vocab, tgt_vocab, cfg.max_len)
    va = load_parallel(data["valid_src"], data["valid_tgt"], src_vocab, tgt_vocab, None)
    res = train(cfg, tr, va, src_vocab, tgt_vocab, out, resume=args.resume)
    print(f"best val BLEU {100 * res.best_bleu:.2f} at epoch {res.best_epoch}")
    return 0


# ---------------------------------------------------------------------------
# translate / evaluate


def _encode_file(path: str, vocab: Vocabulary) -> list[list[int]]:
    lines = read_lines(path)
    srcs = [encode_sentence(vocab, ln) for ln in lines]
    if any(not s for s in srcs):
        raise CorpusError(f"{path}: empty source line")
    return srcs


def cmd_translate(args: argparse.Namespace) -> int:
    params, _, ckpt = load_model(args.checkpoint)
    srcs = _encode_file(args.input, ckpt.src_vocab)
    hyps = translate(params, srcs, args.beam, args.max_len)
    if args.output:
        write_hypotheses(args.output, hyps, ckpt.tgt_vocab)
    else:
        for h in hyps:
            sys.stdout.write(" ".join(ckpt.tgt_vocab.decode(h)) + "\n")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    params, _, ckpt = load_model(args.checkpoint)
    pairs = load_parallel(args.src, args.ref, ckpt.src_vocab, ckpt.tgt_vocab, None)
    if len(pairs) != len(read_lines(args.src)):
        raise CorpusError("evaluation files contain empty lines")
    res = evaluate(params, pairs, args.beam, args.hyp_out, ckpt.tgt_vocab)
    print(f"{100 * res.bleu:.2f}")
    return 0


# ---------------------------------------------------------------------------
# oracle-dump


def oracle_records(params, pairs, src_vocab, tgt_vocab, beam, tau, seed, noise) -> list[dict[str, Any]]:
    """Word and sentence oracles for each pair, with per-candidate BLEU."""
    root = Rng(seed)
    out = []
    for i, pr in enumerate(pairs):
        word_noise = GumbelConfig(tau, root.spawn(i, 0)) if noise else None
        sent_noise = GumbelConfig(tau, root.spawn(i, 1)) if noise else None
        with nx.no_grad():
            ctx = [BOS, *pr.tgt[:-1]]
            logits = teacher_forced_logits(params, [pr.src], [ctx])
        word = [int(word_oracle(lg.value[0], word_noise)) for lg in logits]
        sel = sentence_oracle(params, pr.src, pr.tgt, beam, sent_noise)
        out.append(
            {
                "index": i,
                "source": " ".join(src_vocab.decode(pr.src)),
                "reference": " ".join(tgt_vocab.decode(pr.tgt)),
                "word_oracle": " ".join(tgt_vocab.decode(word, strip_eos=False)),
                "sentence_oracle": " ".join(tgt_vocab.decode(sel.tokens)),
                "sentence_oracle_length": len(sel.tokens),
                "reference_length": len(pr.tgt),
                "best": sel.best,
                "best_bleu": sentence_bleu(sel.tokens, pr.tgt),
                "candidates": [
                    {
                        "tokens": " ".join(tgt_vocab.decode(c.tokens, strip_eos=False)),
                        "score": c.score,
                        "bleu": b,
                    }
                    for c, b in zip(sel.candidates, sel.bleus)
                ],
            }
        )
    return out


def cmd_oracle_dump(args: argparse.Namespace) -> int:
    params, cfg, ckpt = load_model(args.checkpoint)
    pairs = load_parallel(args.src, args.ref, ckpt.src_vocab, ckpt.tgt_vocab, None)
    if args.limit is not None:
        pairs = pairs[: args.limit]
    beam = args.oracle_beam if args.oracle_beam is not None else cfg.oracle_beam
    tau = args.tau if args.tau is not None else cfg.tau
    recs = oracle_records(params, pairs, ckpt.src_vocab, ckpt.tgt_vocab, beam, tau, args.seed, not args.no_noise)
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
    diverged = np.mean([r["sentence_oracle"] != r["reference"] for r in recs]) if recs else 0.0
    print(f"{len(recs)} sentences, sentence oracle differs from reference in {100 * diverged:.1f}%", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def _mode(text: str) -> str:
    try:
        return OracleMode.parse(text).value
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="orseq", description="Seq2seq training with oracle-sampled contexts.")
    ap.add_argument("--version", action="version", version=f"orseq {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary file from a tokenized corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=30000, help="including the 4 reserved entries")
    p.add_argument("--min-freq", type=int, default=1)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus (copy, reverse, cipher)")
    p.add_argument("--config", help="YAML with SyntheticSpec fields")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", choices=("copy", "reverse", "cipher"))
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--swap-prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int, default=5000)
    p.add_argument("--valid", type=int, default=300)
    p.add_argument("--test", type=int, default=500)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; flags override --config values")
    p.add_argument("--config", help="YAML file with training options and data paths")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT_DIR/last.ckpt")
    for key in DATA_KEYS:
        p.add_argument("--" + key.replace("_", "-"))
    p.add_argument("--oracle", type=_mode, help="none, word, word-noise, sentence, sentence-noise")
    for f in _config_fields():
        if f.name == "oracle":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, action="store_const", const=True, default=None)
        else:
            kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
            p.add_argument(flag, type=kind, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="beam-search translate a source file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-len", type=int, help="default 2*|src|+5")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="corpus BLEU (x100) of beam output against references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--hyp-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle-dump", help="write word and sentence oracles per sentence as JSON lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--oracle-beam", type=int, help=f"default from checkpoint ({DEFAULT_ORACLE_BEAM})")
    p.add_argument("--tau", type=float, help=f"default from checkpoint ({DEFAULT_TAU})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-noise", action="store_true", help="oracles without Gumbel noise")
    p.set_defaults(func=cmd_oracle_dump)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        ap.error(str(exc))
    except (CorpusError, CheckpointError, OSError, ValueError) as exc:
        print(f"orseq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
