#!/usr/bin/env python3
"""Sweep the trend experiments (completion benefit, alignment weight, T2I
capacity) over a small grid of seeds and print per-combo P@1 tables with the
margins the acceptance thresholds care about. Used to pick the corpus and
optimizer settings the acceptance tests freeze.

Example:
    python3 scripts/trend_grid.py --total 1600 --steps 150 --seeds 0,1,2
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from modcomp.config import load_run_config
from modcomp.corpus import COMBOS, gen_corpus, skew_counts
from modcomp.model import AblationFlags, CompletionEmbedder
from modcomp.retrieval import evaluate, format_table
from modcomp.training import train


def run_cell(base, records, eval_records, ablation, alpha, t2i_layers, seed):
    model_cfg = replace(base.model, t2i_layers=t2i_layers)
    model = CompletionEmbedder(model_cfg, base.padding, ablation, seed=seed)
    loss_cfg = replace(base.loss, aux_weight=alpha)
    train(records, model, replace(base.train, seed=seed), loss_cfg)
    rep = evaluate(eval_records, model)
    return {**rep.per_combo, "overall": rep.overall}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--total", type=int, default=1600)
    ap.add_argument("--dominant", default="TI_T", choices=COMBOS)
    ap.add_argument("--counts", default=None,
                    help="explicit counts, e.g. TI_TI=1200,TI_T=200,T_TI=200 (overrides --total/--dominant)")
    ap.add_argument("--steps", type=int, default=150)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--sigma", type=float, default=0.25)
    ap.add_argument("--dropout", type=float, default=0.0)
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--aux-temp", type=float, default=1.0)
    ap.add_argument("--eval-per-combo", type=int, default=96)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--skip", default="", help="comma list of cell labels to skip")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    if args.counts:
        counts = {k: int(v) for k, v in (kv.split("=") for kv in args.counts.split(","))}
    else:
        counts = skew_counts(args.total, args.dominant)
    overrides = {
        "run.seed": "0",
        "corpus.noise_sigma": repr(args.sigma),
        "corpus.class_token_dropout": repr(args.dropout),
        "train.steps": str(args.steps),
        "train.batch_size": str(args.batch),
        "loss.aux_weight": repr(args.alpha),
        "loss.aux_temp": repr(args.aux_temp),
    }
    for combo in COMBOS:
        overrides[f"corpus.counts.{combo}"] = str(counts[combo])
        overrides[f"eval.counts.{combo}"] = str(args.eval_per_combo)
    base = load_run_config(None, overrides)
    records = list(gen_corpus(base.corpus))
    eval_records = list(gen_corpus(base.eval_corpus_spec()))
    print(f"train {len(records)} ({counts}), eval {len(eval_records)}, "
          f"steps={args.steps} batch={args.batch} sigma={args.sigma} "
          f"dropout={args.dropout} alpha={args.alpha} aux_temp={args.aux_temp} seeds={seeds}")

    on = AblationFlags()
    cells = [
        ("full", on, args.alpha, 2),
        ("zero_fill", AblationFlags(disable_completion=True), 0.0, 2),
        ("no_padding", AblationFlags(disable_padding=True), args.alpha, 2),
        ("alpha0", on, 0.0, 2),
        ("layers1", on, args.alpha, 1),
        ("layers4", on, args.alpha, 4),
    ]
    skip = {s for s in args.skip.split(",") if s}
    means: dict[str, dict[str, float]] = {}
    rows = [("cell", *COMBOS, "overall", "sec/run")]
    for label, ablation, alpha, layers in cells:
        if label in skip:
            continue
        per_seed = []
        t0 = time.perf_counter()
        for seed in seeds:
            per_seed.append(run_cell(base, records, eval_records, ablation, alpha, layers, seed))
        dt = (time.perf_counter() - t0) / len(seeds)
        means[label] = {k: float(np.mean([p[k] for p in per_seed]))
                        for k in per_seed[0]}
        rows.append((label, *(f"{means[label][c]:.4f}" for c in COMBOS),
                     f"{means[label]['overall']:.4f}", f"{dt:.1f}"))
        print(format_table(rows[:1] + rows[-1:]), flush=True)
    print()
    print(format_table(rows))

    def margin(a, b, key):
        if a in means and b in means:
            print(f"{a} - {b} on {key}: {means[a][key] - means[b][key]:+.4f}")

    print()
    margin("full", "zero_fill", "T_TI")       # want >= +0.05
    margin("full", "no_padding", "T_TI")      # want >= +0.02
    margin("full", "alpha0", "overall")       # want >= 0
    if "full" in means and "alpha0" in means:
        for c in COMBOS:
            print(f"alpha gain {c}: {means['full'][c] - means['alpha0'][c]:+.4f}")
    for pair in (("layers1", "full"), ("full", "layers4")):
        a, b = pair
        if a in means and b in means:
            print(f"capacity {a} -> {b} overall: "
                  f"{means[b]['overall'] - means[a]['overall']:+.4f} (want >= -0.01)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
