#!/usr/bin/env python3
"""Oracle-mode factor grid on the synthetic substitution-cipher task.

Trains every (mode, seed) combination on one generated corpus, scores the
best-validation checkpoint on the test split with beam 10, and writes
``results.json`` plus a table of mean/median test BLEU per mode.

    python experiments/factor_grid.py --out-dir runs/grid
    python experiments/factor_grid.py --modes none word-noise sentence-noise --seeds 1 2 3
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import statistics
import sys
import time
from pathlib import Path

from orseq.data import SyntheticSpec, gen_synthetic, make_pairs, vocab_from_sentences
from orseq.numerics import Rng
from orseq.oracle import OracleMode
from orseq.trainer import TrainConfig, epoch_curves, evaluate, load_model, read_metrics, train

ALL_MODES = [m.value for m in OracleMode]

# corpus: |V|=50, 5k training pairs, swap probability 0.1
DATA = SyntheticSpec(vocab_size=50, min_len=4, max_len=12, task="cipher", pairs=5800, swap_prob=0.1, seed=11)
SPLITS = (5000, 300, 500)
TRAIN = dict(embed=64, hidden=64, batch_size=32, dropout=0.5, epochs=25, patience=100, val_beam=10)


def make_data(spec: SyntheticSpec = DATA):
    srcs, tgts = gen_synthetic(Rng(spec.seed), spec)
    sv, tv = vocab_from_sentences(srcs[: SPLITS[0]]), vocab_from_sentences(tgts[: SPLITS[0]])
    pairs = make_pairs([sv.encode(s) for s in srcs], [tv.encode(t) for t in tgts], None)
    a, b = SPLITS[0], SPLITS[0] + SPLITS[1]
    return pairs[:a], pairs[a:b], pairs[b:], sv, tv


def run_one(mode: str, seed: int, out_dir: Path, data, overrides: dict) -> dict:
    tr, va, te, sv, tv = data
    cfg = TrainConfig(oracle=mode, seed=seed, **{**TRAIN, **overrides})
    run_dir = out_dir / f"{mode}_s{seed}"
    t0 = time.perf_counter()
    res = train(cfg, tr, va, sv, tv, run_dir)
    params, _, _ = load_model(run_dir / "best.ckpt")
    test = evaluate(params, te, 10, run_dir / "test.hyp", tv).bleu
    _, loss, val = epoch_curves(read_metrics(run_dir / "metrics.csv"))
    return {
        "mode": mode,
        "seed": seed,
        "test_bleu": test,
        "best_val_bleu": res.best_bleu,
        "best_epoch": res.best_epoch,
        "val_curve": val,
        "loss_curve": loss,
        "seconds": time.perf_counter() - t0,
        "config": cfg.to_dict(),
    }


def table(results: list[dict]) -> str:
    modes = [m for m in ALL_MODES if any(r["mode"] == m for r in results)]
    lines = [f"{'mode':<16}{'seeds':>6}{'mean':>9}{'median':>9}{'peak ep':>9}  per-seed test BLEU"]
    for m in modes:
        rs = sorted((r for r in results if r["mode"] == m), key=lambda r: r["seed"])
        b = [100 * r["test_bleu"] for r in rs]
        peaks = ",".join(str(r["best_epoch"]) for r in rs)
        per = " ".join(f"{x:.2f}" for x in b)
        lines.append(f"{m:<16}{len(b):>6}{statistics.mean(b):>9.2f}{statistics.median(b):>9.2f}{peaks:>9}  {per}")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/factor-grid")
    ap.add_argument("--modes", nargs="+", default=ALL_MODES, type=lambda s: OracleMode.parse(s).value)
    ap.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    ap.add_argument("--epochs", type=int, help=f"default {TRAIN['epochs']}")
    args = ap.parse_args(argv)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {"epochs": args.epochs} if args.epochs is not None else {}
    data = make_data()
    results_path = out / "results.json"
    results = json.loads(results_path.read_text())["runs"] if results_path.exists() else []
    done = {(r["mode"], r["seed"]) for r in results}
    t0 = time.perf_counter()
    for seed in args.seeds:
        for mode in args.modes:
            if (mode, seed) in done:
                continue
            r = run_one(mode, seed, out, data, overrides)
            results.append(r)
            print(f"{mode:<16} seed {seed}: test BLEU {100 * r['test_bleu']:.2f} "
                  f"(best val epoch {r['best_epoch']}, {r['seconds']:.0f}s)", flush=True)
            results_path.write_text(json.dumps({
                "data": dataclasses.asdict(DATA), "splits": SPLITS, "train": {**TRAIN, **overrides}, "runs": results,
            }, indent=1) + "\n")
    text = table(results)
    (out / "table.txt").write_text(text + "\n")
    print(text)
    print(f"total {time.perf_counter() - t0:.0f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
