"""``dprag`` command line. Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 divergence."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runs
from .config import ConfigError
from .numerics import Divergence
from .pipeline import METHODS

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGENCE = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dprag", description="Desk-scale distilled parametric RAG.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--run-dir", required=True, help="run directory (config.yaml, data/, checkpoints/, reports/)")
        sp.add_argument("--config", help="YAML run config; stored as <run-dir>/config.yaml on first use")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    add("gen-data", "generate the fact world, corpus, training and eval sets")
    add("pretrain-lm", "pretrain the base language model on standard-RAG episodes")
    add("pretrain-encoder", "pretrain and freeze the document encoder")
    for name, help in (("train-generator", "distill the LoRA parameter generator"),
                       ("eval", "evaluate one method on held-out questions")):
        sp = add(name, help)
        sp.add_argument("--ablation", action="append", default=[], metavar="NAME",
                        help="no-cos | no-kl | mask-mode=<stats|random_002|trainable|none> | single-doc-only "
                             "| degraded-synthesis (repeatable)")
        sp.add_argument("--seed", type=int, help="generator seed (default: distill.seed from the config)")
        if name == "eval":
            sp.add_argument("--method", required=True, choices=METHODS)
            sp.add_argument("--split", default="in-domain", choices=sorted(runs.EVAL_SPLITS))
            sp.add_argument("--kind", action="append", choices=runs.KINDS, help="question kind (default: both)")
            sp.add_argument("--limit", type=int, help="evaluate only the first N questions per kind")
    sp = add("attack", "train the weight-to-document inversion attack and its zero-delta control")
    sp.add_argument("--seed", type=int)
    add("overlap", "MinHash/LSH max-Jaccard overlap between eval and training documents")
    sp = add("bench-latency", "per-question latency of all four methods")
    sp.add_argument("-n", type=int, default=20, help="questions per method")
    return p


def _dispatch(args: argparse.Namespace) -> dict:
    run = runs.RunDir.open(args.run_dir, args.config, create=args.command == "gen-data")
    cmd = args.command
    if cmd == "gen-data":
        return runs.gen_data(run)
    if cmd == "pretrain-lm":
        return runs.pretrain_lm_stage(run)
    if cmd == "pretrain-encoder":
        return runs.pretrain_encoder_stage(run)
    if cmd == "train-generator":
        return runs.train_generator_stage(run, runs.parse_ablations(args.ablation), args.seed)
    if cmd == "eval":
        reps = runs.eval_stage(run, args.method, runs.parse_ablations(args.ablation), args.seed, args.split,
                               args.kind or runs.KINDS, args.limit)
        return {k: {"f1": r.f1, "n": len(r.records), "mean_latency": r.mean_latency} for k, r in reps.items()}
    if cmd == "attack":
        return runs.attack_stage(run, args.seed)
    if cmd == "overlap":
        rep = runs.overlap_stage(run)
        return {k: v["mean_max_jaccard_pct"] for k, v in rep.items() if isinstance(v, dict)}
    if cmd == "bench-latency":
        return runs.bench_latency_stage(run, args.n)
    raise ConfigError(f"unknown command {cmd!r}")


def _fail(code: int, kind: str, exc: Exception, **extra) -> int:
    print(json.dumps({"error": kind, "message": str(exc), **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        out = _dispatch(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except runs.MissingPrerequisite as exc:
        return _fail(EXIT_MISSING, "missing-prerequisite", exc, path=str(exc.path), produce_with=exc.command)
    except Divergence as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", exc)
    summary = {k: v for k, v in out.items() if k not in ("loss_every_100", "test_doc_ids", "table")}
    print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
