"""Poisoning, the joint clean + backdoored objective, and the optimiser loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ExperimentConfig
from .denoiser import DenoiserModel, GraphBatch, batch_arrays, cross_entropy_terms, init_model
from .diffusion import _categorical, forward_marginal_backdoored, forward_marginal_clean, sample_noisy
from .errors import InsufficientHosts, NonFiniteLoss
from .graphs import NO_EDGE, Graph, TriggerMasks, TriggerSpec, ValenceTable, inject_trigger
from .sampling import SizeDistribution
from .schedule import LimitDistributions, NoiseSchedule, estimate_limits, make_schedule, type_frequencies

log = logging.getLogger(__name__)

# how a training item is noised
CLEAN, PERSISTENT, ONE_TIME = "clean", "persistent", "one_time"


@dataclass
class PoisonedCorpus:
    clean: list
    backdoored: list                     # (Graph, TriggerMasks)
    provenance: list                     # {"index": original index, "seed": injection seed}
    spec: TriggerSpec

    @property
    def size(self) -> int:
        return len(self.clean) + len(self.backdoored)


@dataclass
class TrainedModel:
    model: DenoiserModel
    sched: NoiseSchedule
    limits: LimitDistributions
    size_dist: SizeDistribution
    config: ExperimentConfig
    log: list = field(default_factory=list)


def poison_count(p: float, N: int) -> int:
    return int(math.floor(p / 100.0 * N + 0.5))


def poison_corpus(graphs: Sequence[Graph], spec: TriggerSpec, p: float, rng_seed: int) -> PoisonedCorpus:
    """Inject the trigger into ``round(p% * N)`` randomly chosen hosts."""
    N = len(graphs)
    if N == 0:
        raise InsufficientHosts("empty corpus")
    want = poison_count(p, N)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(N)
    chosen = []
    for idx in order:
        if len(chosen) == want:
            break
        if spec.fits(graphs[int(idx)].n):
            chosen.append(int(idx))
    if len(chosen) < want:
        raise InsufficientHosts(f"only {len(chosen)} of {N} graphs can host the trigger, need {want}")
    seeds = rng.integers(0, 2**63 - 1, size=len(chosen))
    backdoored, provenance = [], []
    for idx, seed in zip(chosen, seeds):
        backdoored.append(inject_trigger(graphs[idx], spec, int(seed)))
        provenance.append({"index": idx, "seed": int(seed)})
    taken = set(chosen)
    clean = [g for k, g in enumerate(graphs) if k not in taken]
    return PoisonedCorpus(clean, backdoored, provenance, spec)


def trigger_from_config(cfg: ExperimentConfig, vt: ValenceTable = ValenceTable()) -> TriggerSpec:
    return TriggerSpec.chain(vt.node_index(cfg.trigger_node), vt.edge_index(cfg.trigger_bond),
                             cfg.trigger_size, vt.a, vt.d, connector_edges=cfg.connector_edges,
                             connector_type=vt.edge_index(cfg.connector_bond))


def corpus_limits(corpus: PoisonedCorpus, r: float) -> LimitDistributions:
    if corpus.backdoored:
        return estimate_limits(corpus.clean, [g for g, _ in corpus.backdoored], r)
    mX, mE = type_frequencies(corpus.clean)
    return LimitDistributions(mX, mE, mX, mE, r)


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def _copy_params(src: DenoiserModel, dst: DenoiserModel) -> None:
    with torch.no_grad():
        for k, v in dst.params.items():
            v.copy_(src.params[k].to(v.dtype))


def make_optimizer(model: DenoiserModel, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(list(model.params.values()), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.eps, weight_decay=cfg.weight_decay)


def noise_item(g: Graph, masks: Optional[TriggerMasks], kind: str, spec: TriggerSpec,
               sched: NoiseSchedule, limits: LimitDistributions, t: int, rng) -> Graph:
    if kind == PERSISTENT:
        soft = forward_marginal_backdoored(g, masks, spec, sched, limits, t)
        return sample_noisy(soft, masks, rng)
    # clean graphs and one-time injected graphs follow the clean chain, nothing pinned
    return sample_noisy(forward_marginal_clean(g, sched, limits, t), None, rng)


def noise_batch(batch, ts: np.ndarray, sched: NoiseSchedule, limits: LimitDistributions,
                spec: TriggerSpec, rng: np.random.Generator) -> GraphBatch:
    """Vectorised :func:`noise_item` over a padded batch; same distribution per graph."""
    target = batch_arrays([g.X for g, _, _ in batch], [g.E for g, _, _ in batch])
    X, E = target.X.numpy(), target.E.numpy()
    B, N, a = X.shape
    d = E.shape[-1]
    persistent = np.array([kind == PERSISTENT for _, _, kind in batch])
    mX = np.where(persistent[:, None], limits.mXB, limits.mX)
    mE = np.where(persistent[:, None], limits.mEB, limits.mE)
    ab = np.array([sched.alpha_bar_at(int(t)) for t in ts])
    PX = ab[:, None, None] * X + (1 - ab)[:, None, None] * X.sum(-1, keepdims=True) * mX[:, None, :]
    PE = (ab[:, None, None, None] * E
          + (1 - ab)[:, None, None, None] * E.sum(-1, keepdims=True) * mE[:, None, None, :])
    for b in np.flatnonzero(persistent):
        _, masks, _ = batch[b]
        n = masks.n
        Xf, Ef = masks.placed(spec)
        PX[b, :n] = np.where(masks.MX, Xf, PX[b, :n])
        PE[b, :n, :n] = np.where(masks.ME[:, :, None], Ef, PE[b, :n, :n])
    mask = target.mask.numpy()
    PX[~mask] = np.eye(a)[0]
    xt = _categorical(rng, PX)
    iu, ju = np.triu_indices(N, 1)
    et = np.zeros((B, N, N), dtype=np.int64)
    if len(iu):
        PEu = PE[:, iu, ju]
        PEu[PEu.sum(-1) == 0] = np.eye(d)[NO_EDGE]
        draws = _categorical(rng, PEu)
        et[:, iu, ju] = draws
        et[:, ju, iu] = draws
    Xn = np.eye(a)[xt] * mask[:, :, None]
    pair = mask[:, :, None] & mask[:, None, :]
    En = np.eye(d)[et] * pair[..., None]
    return GraphBatch(torch.from_numpy(Xn), torch.from_numpy(En), target.mask)


def train_step(model: DenoiserModel, optimizer: torch.optim.Optimizer, batch, sched: NoiseSchedule,
               limits: LimitDistributions, spec: TriggerSpec, rng_seed) -> tuple[float, float, float]:
    """One optimiser update on ``batch`` = list of ``(graph, masks, kind)``.

    Returns ``(total, clean_term, backdoor_term)``, each normalised by batch size;
    ``t`` is drawn per graph.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ts = rng.integers(1, sched.T + 1, size=len(batch))
    target = batch_arrays([g.X for g, _, _ in batch], [g.E for g, _, _ in batch])
    noisy_b = noise_batch(batch, ts, sched, limits, spec, rng)
    tfrac = torch.tensor(ts / sched.T, dtype=model.dtype)
    optimizer.zero_grad(set_to_none=True)
    per_graph = cross_entropy_terms(model, target, noisy_b, tfrac)
    B = len(batch)
    is_bd = torch.tensor([kind != CLEAN for _, _, kind in batch])
    loss = per_graph.sum() / B
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite batch loss {loss.item()}")
    loss.backward()
    optimizer.step()
    model.round_to_float32()
    with torch.no_grad():
        l_bd = float(per_graph[is_bd].sum().item() / B)
        l_clean = float(per_graph[~is_bd].sum().item() / B)
    return float(loss.item()), l_clean, l_bd


def _stratified_batches(clean_items: list, bd_items: list, batch_size: int, rng) -> list:
    """Shuffle each group and spread backdoored items evenly over the batches."""
    total = len(clean_items) + len(bd_items)
    n_batches = max(1, math.ceil(total / batch_size))
    c_idx = rng.permutation(len(clean_items))
    b_idx = rng.permutation(len(bd_items))
    c_parts = np.array_split(c_idx, n_batches)
    b_parts = np.array_split(b_idx, n_batches)[::-1]
    batches = []
    for cp, bp in zip(c_parts, b_parts):
        batch = [clean_items[i] for i in cp] + [bd_items[i] for i in bp]
        if batch:
            batches.append(batch)
    return batches


def fit(model: DenoiserModel, clean_items: list, bd_items: list, sched: NoiseSchedule,
        limits: LimitDistributions, spec: TriggerSpec, cfg: ExperimentConfig, epochs: int,
        seed: int, on_epoch: Optional[Callable] = None, checkpoint_fn: Optional[Callable] = None) -> list:
    """Epoch loop shared by training and fine-tuning; updates ``model`` in place.

    The optimiser works on a copy in ``cfg.train_dtype``; parameter values are
    float32-representable throughout, so the copy back is exact.
    """
    work = model.to(_DTYPES[cfg.train_dtype])
    optimizer = make_optimizer(work, cfg)
    rng = np.random.default_rng(seed)
    records = []
    step = 0
    last_good = model.copy()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        batches = _stratified_batches(clean_items, bd_items, cfg.batch_size, rng)
        for batch in batches:
            try:
                total, lc, lb = train_step(work, optimizer, batch, sched, limits, spec, rng)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"epoch {epoch} step {step}: {exc}", last_good=last_good) from None
            sums += (total, lc, lb)
            step += 1
        nb = max(len(batches), 1)
        rec = {"epoch": epoch, "step": step, "loss_clean": sums[1] / nb, "loss_backdoor": sums[2] / nb,
               "lr": cfg.lr, "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
        _copy_params(work, model)
        if on_epoch is not None:
            extra = on_epoch(epoch, model)
            if extra:
                rec.update(extra)
        records.append(rec)
        log.debug("epoch %d loss_clean=%.4f loss_backdoor=%.4f", epoch, rec["loss_clean"], rec["loss_backdoor"])
        last_good = model.copy()
        if checkpoint_fn is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            checkpoint_fn(epoch, model)
    return records


def run_training(corpus: PoisonedCorpus, cfg: ExperimentConfig, on_epoch: Optional[Callable] = None,
                 checkpoint_fn: Optional[Callable] = None) -> TrainedModel:
    """Backdoored training end to end; ``poison_rate = 0`` is plain clean training."""
    torch.manual_seed(cfg.seed)
    sched = make_schedule(cfg.schedule, cfg.T)
    limits = corpus_limits(corpus, cfg.r)
    all_graphs = corpus.clean + [g for g, _ in corpus.backdoored]
    model = init_model(all_graphs[0].a, all_graphs[0].d, (cfg.h_node, cfg.h_edge, cfg.h_global),
                       cfg.n_layers, rng_seed=cfg.seed, max_n=max(cfg.max_n, max(g.n for g in all_graphs)))
    kind = PERSISTENT if cfg.persistent_trigger else ONE_TIME
    clean_items = [(g, None, CLEAN) for g in corpus.clean]
    bd_items = [(g, m, kind) for g, m in corpus.backdoored]
    records = fit(model, clean_items, bd_items, sched, limits, corpus.spec, cfg, cfg.epochs,
                  seed=cfg.seed + 1, on_epoch=on_epoch, checkpoint_fn=checkpoint_fn)
    return TrainedModel(model, sched, limits, SizeDistribution.from_graphs(all_graphs), cfg, records)


def finetune(trained: TrainedModel, corpus: PoisonedCorpus, mode: str, cfg: ExperimentConfig,
             epochs: Optional[int] = None, fresh_graphs: Optional[Sequence[Graph]] = None,
             on_epoch: Optional[Callable] = None, seed: Optional[int] = None) -> TrainedModel:
    """Continue training a (backdoored) model as a defender would.

    ``mode="clean"`` trains on the clean graphs only. ``mode="adversarial"`` adds
    ``adversarial_ratio`` percent (of the corpus size) freshly injected graphs that
    are noised with the clean chain, i.e. mapped to the clean limit distribution.
    The input model is left untouched.
    """
    if mode not in ("clean", "adversarial"):
        raise ValueError(f"mode must be 'clean' or 'adversarial', got {mode!r}")
    epochs = cfg.finetune_epochs if epochs is None else epochs
    seed = cfg.seed + 1000 if seed is None else seed
    model = trained.model.copy()
    clean_items = [(g, None, CLEAN) for g in corpus.clean]
    bd_items = []
    if mode == "adversarial":
        pool = list(fresh_graphs) if fresh_graphs is not None else corpus.clean
        want = poison_count(cfg.adversarial_ratio, corpus.size)
        adv = poison_corpus(pool, corpus.spec, 100.0 * want / len(pool), seed + 7)
        bd_items = [(g, m, ONE_TIME) for g, m in adv.backdoored]
    records = fit(model, clean_items, bd_items, trained.sched, trained.limits, corpus.spec, cfg,
                  epochs, seed=seed, on_epoch=on_epoch) if epochs > 0 else []
    return TrainedModel(model, trained.sched, trained.limits, trained.size_dist, trained.config,
                        trained.log + records)


def load_graphs(cfg: ExperimentConfig, vt: ValenceTable = ValenceTable()) -> list:
    """The configured corpus: a JSONL file, or synthetic toy molecules when ``data`` is empty."""
    from .datasets import generate_toy_dataset, read_jsonl

    if cfg.data:
        return read_jsonl(cfg.data, vt.a, vt.d)
    return generate_toy_dataset(cfg.toy_count, cfg.max_n, vt, cfg.data_seed)


def build_corpus(cfg: ExperimentConfig, vt: ValenceTable = ValenceTable(),
                 graphs: Optional[Sequence[Graph]] = None) -> PoisonedCorpus:
    """Poison the configured corpus; the host choice is seeded by ``cfg.seed``."""
    graphs = load_graphs(cfg, vt) if graphs is None else graphs
    return poison_corpus(graphs, trigger_from_config(cfg, vt), cfg.poison_rate, cfg.seed)
