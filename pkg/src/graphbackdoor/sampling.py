"""Prior draws and ancestral reverse sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .denoiser import DTYPE, GraphBatch, forward, predict_probs
from .diffusion import _categorical, reverse_matrices, reverse_mixture
from .errors import BadDistribution, OutOfRange
from .graphs import NO_EDGE, Graph, SoftGraph, _rng
from .schedule import LimitDistributions, NoiseSchedule


@dataclass(frozen=True)
class SizeDistribution:
    sizes: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if not self.sizes or len(self.sizes) != len(self.probs):
            raise BadDistribution("size distribution needs a nonempty support")
        p = np.asarray(self.probs, dtype=np.float64)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise BadDistribution("size probabilities must be nonnegative and sum to 1")
        if min(self.sizes) < 1:
            raise BadDistribution("sizes must be positive")

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "SizeDistribution":
        counts = np.bincount([g.n for g in graphs])
        sizes = np.flatnonzero(counts)
        return cls(tuple(int(s) for s in sizes), tuple(float(c) for c in counts[sizes] / counts.sum()))

    @classmethod
    def fixed(cls, n: int) -> "SizeDistribution":
        return cls((n,), (1.0,))

    def draw(self, rng) -> int:
        return int(self.sizes[_categorical(_rng(rng), np.asarray(self.probs))])

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes), "probs": list(self.probs)}

    @classmethod
    def from_dict(cls, d: dict) -> "SizeDistribution":
        return cls(tuple(int(s) for s in d["sizes"]), tuple(float(p) for p in d["probs"]))


def _prior_types(rng, n: int, mX: np.ndarray, mE: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xt = _categorical(rng, np.broadcast_to(mX, (n, len(mX))))
    et = np.zeros((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    if len(iu):
        draws = _categorical(rng, np.broadcast_to(mE, (len(iu), len(mE))))
        et[iu, ju] = draws
        et[ju, iu] = draws
    return xt, et


def sample_prior(limits: LimitDistributions, size_dist: SizeDistribution, backdoored: bool,
                 rng_seed=0) -> Graph:
    """``G^T``: size from ``size_dist``, then i.i.d. node and pair types from the limits."""
    rng = _rng(rng_seed)
    n = size_dist.draw(rng)
    mX, mE = limits.node(backdoored), limits.edge(backdoored)
    xt, et = _prior_types(rng, n, mX, mE)
    return Graph.from_types(xt, et, len(mX), len(mE))


def reverse_posterior(pred: SoftGraph, g_t: Graph, sched: NoiseSchedule, limits: LimitDistributions,
                      t: int, backdoored: bool = False) -> SoftGraph:
    """``p(G^{t-1} | G^t)`` obtained by mixing true posteriors with the prediction."""
    if not 1 <= t <= sched.T:
        raise OutOfRange(f"reverse step needs 1 <= t <= {sched.T}, got {t}")
    (QtX, QbX), (QtE, QbE) = reverse_matrices(sched, limits, t, backdoored)
    n, d = g_t.n, g_t.d
    PX = reverse_mixture(pred.PX, g_t.X, QtX, QbX)
    PE = np.zeros_like(g_t.E)
    iu, ju = np.triu_indices(n, 1)
    vals = reverse_mixture(pred.PE[iu, ju], g_t.E[iu, ju], QtE, QbE)
    PE[iu, ju] = vals
    PE[ju, iu] = vals
    PE[np.arange(n), np.arange(n)] = np.eye(d)[NO_EDGE]
    return SoftGraph(PX, PE)


def _draw(rng, PX: np.ndarray, PE: np.ndarray) -> Graph:
    n, a = PX.shape
    d = PE.shape[-1]
    xt = _categorical(rng, PX)
    et = np.zeros((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    if len(iu):
        draws = _categorical(rng, PE[iu, ju])
        et[iu, ju] = draws
        et[ju, iu] = draws
    return Graph.from_types(xt, et, a, d)


def reverse_step(model, g_t: Graph, t: int, sched: NoiseSchedule, limits: LimitDistributions,
                 backdoored: bool = False, rng_seed=0) -> Graph:
    """Sample ``G^{t-1}``; no trigger mask is involved."""
    post = reverse_posterior(forward(model, g_t, t, sched.T), g_t, sched, limits, t, backdoored)
    return _draw(_rng(rng_seed), post.PX, post.PE)


def graph_seeds(rng_seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent per-graph streams; graph ``k`` replays from ``graph_seeds(s, count)[k]``."""
    return np.random.SeedSequence(rng_seed).spawn(count)


def _denoise_group(model, priors: list[Graph], rngs: list, sched: NoiseSchedule,
                   limits: LimitDistributions, backdoored: bool) -> list[Graph]:
    B = len(priors)
    n, a, d = priors[0].n, priors[0].a, priors[0].d
    X = np.stack([g.X for g in priors])
    E = np.stack([g.E for g in priors])
    mask = torch.ones((B, n), dtype=torch.bool)
    iu, ju = np.triu_indices(n, 1)
    for t in range(sched.T, 0, -1):
        with torch.no_grad():
            px, pe = predict_probs(model, GraphBatch(torch.from_numpy(X), torch.from_numpy(E), mask),
                                   torch.full((B,), t / sched.T, dtype=DTYPE))
        px, pe = px.numpy(), pe.numpy()
        (QtX, QbX), (QtE, QbE) = reverse_matrices(sched, limits, t, backdoored)
        PX = reverse_mixture(px, X, QtX, QbX)
        PEu = reverse_mixture(pe[:, iu, ju], E[:, iu, ju], QtE, QbE)
        X = np.zeros((B, n, a))
        E = np.zeros((B, n, n, d))
        for b in range(B):
            xt = _categorical(rngs[b], PX[b])
            X[b, np.arange(n), xt] = 1.0
            et = np.zeros((n, n), dtype=np.int64)
            if len(iu):
                draws = _categorical(rngs[b], PEu[b])
                et[iu, ju] = draws
                et[ju, iu] = draws
            E[b] = np.eye(d)[et]
    return [Graph(X[b], E[b]) for b in range(B)]


def generate(model, sched: NoiseSchedule, limits: LimitDistributions, size_dist: SizeDistribution,
             count: int, backdoored: bool = False, rng_seed: int = 0) -> list[Graph]:
    """``count`` graphs, each from a fresh prior and ``T`` reverse steps.

    Graph ``k`` uses its own stream from :func:`graph_seeds`, so results do not
    depend on how graphs of equal size are grouped into network batches.
    """
    if count == 0:
        return []
    rngs = [np.random.default_rng(s) for s in graph_seeds(rng_seed, count)]
    priors = [sample_prior(limits, size_dist, backdoored, r) for r in rngs]
    out: list = [None] * count
    by_size: dict[int, list[int]] = {}
    for k, g in enumerate(priors):
        by_size.setdefault(g.n, []).append(k)
    for n in sorted(by_size):
        idx = by_size[n]
        for k, g in zip(idx, _denoise_group(model, [priors[k] for k in idx], [rngs[k] for k in idx],
                                            sched, limits, backdoored)):
            out[k] = g
    return out
