"""Command-line front end.

Five subcommands cover the pipeline: gen-data, train, eval, bias, gradcheck.
Everything a command writes is a deterministic function of the config file
plus the seed, so rerunning with unchanged inputs reproduces output files
byte for byte. Exit codes: 0 on success, 2 on config/data/checkpoint errors,
3 when training diverges (the rolled-back checkpoint is still written).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

from .config import RunConfig, load_run_config
from .corpus import corpus_tallies, gen_corpus, read_manifest, write_manifest
from .errors import (CheckpointError, ConfigError, ContractError,
                     DegenerateInputError, DimensionError, EmptyCorpusError,
                     ManifestError, PaddingOverflowError, TrainingDiverged)
from .model import CompletionEmbedder, load_checkpoint, save_checkpoint
from .retrieval import bias_experiment, evaluate
from .training import apply_low_rank_adapters, train

_USAGE_ERRORS = (ConfigError, ContractError, DimensionError, DegenerateInputError,
                 EmptyCorpusError, ManifestError, PaddingOverflowError,
                 CheckpointError, OSError)


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="key = value config file (defaults apply when omitted)")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory")
    p.add_argument("--seed", metavar="N", type=int, default=None,
                   help="overrides run.seed from the config")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed reduction order (always on in this implementation)")


def _load(args: argparse.Namespace, extra: dict[str, str] | None = None) -> RunConfig:
    overrides = dict(extra or {})
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    return load_run_config(args.config, overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tally_line(label: str, records) -> str:
    by_combo = corpus_tallies(records)["combo"]
    parts = " ".join(f"{c}={n}" for c, n in sorted(by_combo.items()))
    return f"{label}: {parts} total={sum(by_combo.values())}"


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    train_records = list(gen_corpus(cfg.corpus))
    eval_records = list(gen_corpus(cfg.eval_corpus_spec()))
    write_manifest(train_records, out / "train_manifest.jsonl")
    write_manifest(eval_records, out / "eval_manifest.jsonl")
    print(_tally_line("train", train_records))
    print(_tally_line("eval", eval_records))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    extra: dict[str, str] = {}
    if args.aux_weight is not None:
        extra["loss.aux_weight"] = repr(args.aux_weight)
    if args.t2i_layers is not None:
        extra["model.t2i_layers"] = str(args.t2i_layers)
    cfg = _load(args, extra)
    out = _out_dir(args)
    manifest = out / "train_manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"{manifest} not found; run gen-data first")
    records = read_manifest(manifest)
    model = cfg.build_model()
    if cfg.adapter is not None:
        apply_low_rank_adapters(model, cfg.adapter, seed=cfg.seed)
    try:
        trace = train(records, model, cfg.train, cfg.loss,
                      trace_path=out / "loss_trace.txt")
    except TrainingDiverged as e:
        save_checkpoint(model, out / "checkpoint.bin")
        print(f"error: {e} (checkpoint rolled back to the last finite step)",
              file=sys.stderr)
        return 3
    save_checkpoint(model, out / "checkpoint.bin")
    print(f"trained {len(trace)} steps; final loss {trace[-1][1]:.6f}")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'loss_trace.txt'}")
    return 0


def _check_eval_config(cfg: RunConfig, model: CompletionEmbedder, checkpoint: str) -> None:
    """A config given at eval time must describe the checkpointed architecture."""
    want, got = asdict(cfg.model), asdict(model.cfg)
    bad = [k for k in want if want[k] != got[k]]
    if bad:
        detail = ", ".join(f"{k}: config {want[k]!r} vs checkpoint {got[k]!r}" for k in bad)
        raise ConfigError(f"config does not match checkpoint {checkpoint}: {detail}")


def cmd_eval(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    checkpoint = args.checkpoint or str(out / "checkpoint.bin")
    manifest = args.manifest or str(out / "eval_manifest.jsonl")
    model = load_checkpoint(checkpoint)
    if args.config is not None:
        _check_eval_config(_load(args), model, checkpoint)
    records = read_manifest(manifest)
    report = evaluate(records, model)
    report.write(out / "score_report.jsonl")
    print(report.table())
    print(f"wrote {out / 'score_report.jsonl'}")
    return 0


def cmd_bias(args: argparse.Namespace) -> int:
    cfg = _load(args)
    out = _out_dir(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    eval_records = list(gen_corpus(cfg.eval_corpus_spec()))

    def factory(ablation, seed):
        return CompletionEmbedder(cfg.model, cfg.padding, ablation, seed=seed)

    report = bias_experiment(cfg.corpus, eval_records, factory, cfg.train, cfg.loss,
                             seeds=seeds)
    report.write(out / "bias_report.jsonl")
    print(report.table())
    for line in report.failures:
        print(f"failed cell: {line}", file=sys.stderr)
    print(f"wrote {out / 'bias_report.jsonl'}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import full_report  # heavy import, only needed here

    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = full_report(seeds)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="modcomp",
        description="multi-modal embedding with modality completion: pipeline commands",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/eval manifests from the config")
    _common_flags(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on the manifests in --out")
    _common_flags(p)
    p.add_argument("--aux-weight", type=float, default=None,
                   help="overrides loss.aux_weight")
    p.add_argument("--t2i-layers", type=int, default=None,
                   help="overrides model.t2i_layers")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against an eval manifest")
    _common_flags(p)
    p.add_argument("--checkpoint", metavar="PATH", default=None,
                   help="defaults to OUT/checkpoint.bin")
    p.add_argument("--manifest", metavar="PATH", default=None,
                   help="defaults to OUT/eval_manifest.jsonl")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bias", help="skewed-corpus bias experiment, both architectures")
    _common_flags(p)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.set_defaults(fn=cmd_bias)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated check seeds")
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
