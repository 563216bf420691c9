"""Desk-scale attack and defense experiments shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig, load_config
from .graphs import Graph, ValenceTable
from .metrics import evaluate
from .sampling import generate
from .training import TrainedModel, build_corpus, finetune, load_graphs, run_training

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    label: str
    poison_rate: float
    seed: int
    persistent: bool
    clean_validity: Optional[float]
    asr: float
    train_seconds: float
    num_params: int
    model: Optional[TrainedModel] = field(default=None, repr=False)

    def summary(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "model"}


def score(tm: TrainedModel, count: int, seed: int, vt: ValenceTable = ValenceTable(),
          clean: bool = True) -> tuple[Optional[float], float]:
    """Clean-sampling validity (optional) and backdoored-sampling ASR."""
    v = None
    if clean:
        gs = generate(tm.model, tm.sched, tm.limits, tm.size_dist, count, False, seed)
        v = evaluate(gs, vt, "clean").validity
    gb = generate(tm.model, tm.sched, tm.limits, tm.size_dist, count, True, seed + 1)
    return v, evaluate(gb, vt, "backdoored").asr


def train_run(cfg: ExperimentConfig, graphs: Sequence[Graph], label: str, clean_score: bool = True,
              keep_model: bool = False, vt: ValenceTable = ValenceTable()) -> RunResult:
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    tm = run_training(build_corpus(cfg, vt, graphs), cfg)
    seconds = time.perf_counter() - t0
    v, asr = score(tm, cfg.sample_count, 10_000 + cfg.seed, vt, clean_score)
    log.info("%s: validity=%s asr=%.3f (%.0fs)", label, v, asr, seconds)
    return RunResult(label, cfg.poison_rate, cfg.seed, cfg.persistent_trigger, v, asr, seconds,
                     tm.model.num_params(), tm if keep_model else None)


def attack_trend(cfg: ExperimentConfig, graphs: Sequence[Graph], seeds: Sequence[int] = (0, 1, 2),
                 low: float = 1.0, high: float = 10.0) -> dict:
    """Main attack, clean control and the poison-rate sweep."""
    t0 = time.perf_counter()
    main = train_run(cfg, graphs, "attack", keep_model=True)
    control = train_run(cfg.replace(poison_rate=0.0), graphs, "clean-control")
    sweep = []
    for s in seeds:
        lo = train_run(cfg.replace(poison_rate=low, seed=s), graphs, f"pr{low:g}-seed{s}", clean_score=False)
        hi = train_run(cfg.replace(poison_rate=high, seed=s), graphs, f"pr{high:g}-seed{s}", clean_score=False)
        sweep.append((lo, hi))
    return {"main": main, "control": control, "sweep": sweep, "seconds": time.perf_counter() - t0}


def one_time_ablation(cfg: ExperimentConfig, graphs: Sequence[Graph]) -> RunResult:
    return train_run(cfg.replace(persistent_trigger=False), graphs, "one-time", clean_score=False)


def defenses(main: RunResult, cfg: ExperimentConfig, graphs: Sequence[Graph],
             fresh: Optional[Sequence[Graph]] = None, vt: ValenceTable = ValenceTable()) -> dict:
    """Clean and adversarial fine-tuning of the attacked model."""
    corpus = build_corpus(cfg, vt, graphs)
    out = {"pre_asr": main.asr}
    for mode in ("clean", "adversarial"):
        t0 = time.perf_counter()
        tuned = finetune(main.model, corpus, mode, cfg, fresh_graphs=fresh)
        _, asr = score(tuned, cfg.sample_count, 10_000 + cfg.seed, vt, clean=False)
        out[mode] = {"asr": asr, "seconds": time.perf_counter() - t0}
    return out


def desk_config(**overrides) -> ExperimentConfig:
    return load_config(None, "desk", **overrides)


def fresh_graphs(cfg: ExperimentConfig, vt: ValenceTable = ValenceTable()) -> list[Graph]:
    """Held-out toy molecules for adversarial fine-tuning (different data seed)."""
    return load_graphs(cfg.replace(data="", data_seed=cfg.data_seed + 1000, toy_count=cfg.toy_count), vt)


def majority_monotone(sweep) -> tuple[int, int]:
    wins = sum(1 for lo, hi in sweep if hi.asr >= lo.asr)
    return wins, len(sweep)


def mean(xs) -> float:
    return float(np.mean(list(xs)))
