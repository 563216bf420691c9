"""Command-line entry point: ``graphbackdoor <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from . import checkpoint
from .config import PROFILES, ExperimentConfig, load_config
from .datasets import (SdfReport, atomic_write_text, generate_toy_dataset, parse_sdf_subset,
                       read_jsonl, write_jsonl)
from .errors import DataError, GraphBackdoorError, NumericError
from .graphs import ValenceTable
from .metrics import detect, evaluate
from .sampling import generate, graph_seeds
from .training import build_corpus, finetune, run_training

log = logging.getLogger("graphbackdoor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=out_required, help="output path (written atomically)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphbackdoor", description="Backdoor lab for discrete graph diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert an SDF (V2000) file to JSONL")
    p.add_argument("sdf")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-hydrogens", action="store_true")

    p = sub.add_parser("gen-data", help="write synthetic toy molecules as JSONL")
    _common(p, out_required=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", help="poison the corpus and train a denoiser")
    _common(p, out_required=True)
    p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")

    p = sub.add_parser("sample", help="generate graphs from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--backdoored", action="store_true", help="start from the backdoored limit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="validity / uniqueness / ASR of a JSONL corpus")
    p.add_argument("graphs")
    p.add_argument("--mode", choices=("clean", "backdoored"), default="clean")
    p.add_argument("--config")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--out")

    p = sub.add_parser("defend-detect", help="flag suspects dissimilar to a clean reference")
    p.add_argument("suspects")
    p.add_argument("--reference", required=True)
    p.add_argument("--quantile", type=float)
    _common(p)

    p = sub.add_parser("defend-finetune", help="fine-tune a checkpoint as a defender")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=("clean", "adversarial"), default="clean")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    p.add_argument("checkpoint")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, args.profile, **overrides)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_ingest(args, vt: ValenceTable) -> int:
    try:
        data = Path(args.sdf).read_bytes()
    except OSError as exc:
        raise DataError(f"{args.sdf}: {exc.strerror}") from None
    report = SdfReport()
    try:
        graphs = parse_sdf_subset(data, vt, drop_hydrogens=not args.keep_hydrogens, report=report)
    except DataError as exc:
        raise DataError(f"{args.sdf}: {exc}") from None
    write_jsonl(args.out, graphs)
    print(json.dumps({"parsed": report.parsed, "skipped": len(report.skipped),
                      "reasons": [r for _, _, r in report.skipped]}))
    return 0


def cmd_gen_data(args, vt: ValenceTable) -> int:
    cfg = _config(args)
    count = cfg.toy_count if args.count is None else args.count
    seed = cfg.data_seed if args.seed is None else args.seed
    write_jsonl(args.out, generate_toy_dataset(count, cfg.max_n, vt, seed))
    return 0


def cmd_train(args, vt: ValenceTable) -> int:
    cfg = _config(args)
    corpus = build_corpus(cfg, vt)
    tm = run_training(corpus, cfg)
    digest = checkpoint.save(args.out, tm)
    log_path = args.log or f"{args.out}.log.jsonl"
    atomic_write_text(log_path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in tm.log))
    print(json.dumps({"checkpoint": args.out, "checksum": digest, "fingerprint": cfg.fingerprint(),
                      "clean": len(corpus.clean), "backdoored": len(corpus.backdoored)}))
    return 0


def cmd_sample(args, vt: ValenceTable) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    tm = checkpoint.load(args.checkpoint)
    graphs = generate(tm.model, tm.sched, tm.limits, tm.size_dist, args.count, args.backdoored, args.seed)
    seeds = graph_seeds(args.seed, args.count)
    metas = [{"seed": args.seed, "index": k, "spawn_key": list(s.spawn_key),
              "backdoored": bool(args.backdoored)} for k, s in enumerate(seeds)]
    write_jsonl(args.out, graphs, metas)
    return 0


def cmd_eval(args, vt: ValenceTable) -> int:
    graphs = read_jsonl(args.graphs, vt.a, vt.d)
    fingerprint = load_config(args.config, args.profile).fingerprint() if args.config else ""
    report = evaluate(graphs, vt, args.mode, fingerprint)
    _emit(report.to_json(), args.out)
    return 0


def cmd_detect(args, vt: ValenceTable) -> int:
    cfg = _config(args)
    q = cfg.detect_quantile if args.quantile is None else args.quantile
    suspects = read_jsonl(args.suspects, vt.a, vt.d)
    reference = read_jsonl(args.reference, vt.a, vt.d)
    report = detect(suspects, reference, q)
    _emit(report.to_json(), args.out)
    return 0


def cmd_finetune(args, vt: ValenceTable) -> int:
    tm = checkpoint.load(args.checkpoint)
    cfg = tm.config if args.seed is None else tm.config.replace(seed=args.seed)
    corpus = build_corpus(tm.config, vt)
    out = finetune(tm, corpus, args.mode, cfg, epochs=args.epochs)
    digest = checkpoint.save(args.out, out)
    print(json.dumps({"checkpoint": args.out, "checksum": digest, "mode": args.mode}))
    return 0


def cmd_inspect(args, vt: ValenceTable) -> int:
    header = checkpoint.header_of(args.checkpoint)
    header["schedule"] = {"kind": header["schedule"]["kind"], "T": header["T"]}
    print(json.dumps(header, sort_keys=True, indent=1))
    return 0


COMMANDS = {
    "ingest": cmd_ingest, "gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
    "eval": cmd_eval, "defend-detect": cmd_detect, "defend-finetune": cmd_finetune,
    "inspect-checkpoint": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args, ValenceTable())
    except UsageError as exc:
        print(f"graphbackdoor {args.command}: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"graphbackdoor {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except GraphBackdoorError as exc:
        print(f"graphbackdoor {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
