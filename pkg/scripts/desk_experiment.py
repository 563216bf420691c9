"""Run the desk-scale attack, ablation and defense experiments and print a JSON summary.

    python scripts/desk_experiment.py --out results/desk.json
"""
from __future__ import annotations

import argparse
import json
import logging
import time

from graphbackdoor import desk
from graphbackdoor.datasets import atomic_write_text
from graphbackdoor.training import load_graphs


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", help="write the JSON summary here as well")
    ap.add_argument("--epochs", type=int, help="override the desk epoch budget")
    ap.add_argument("--skip-defenses", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {"epochs": args.epochs} if args.epochs else {}
    cfg = desk.desk_config(**overrides)
    graphs = load_graphs(cfg)
    t0 = time.perf_counter()
    trend = desk.attack_trend(cfg, graphs)
    ablation = desk.one_time_ablation(cfg, graphs)
    summary = {
        "config": cfg.fingerprint(),
        "attack": trend["main"].summary(),
        "control": trend["control"].summary(),
        "sweep": [[lo.summary(), hi.summary()] for lo, hi in trend["sweep"]],
        "trend_seconds": trend["seconds"],
        "one_time": ablation.summary(),
    }
    if not args.skip_defenses:
        summary["defenses"] = desk.defenses(trend["main"], cfg, graphs, desk.fresh_graphs(cfg))
    summary["total_seconds"] = time.perf_counter() - t0
    text = json.dumps(summary, indent=1, sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")


if __name__ == "__main__":
    main()
