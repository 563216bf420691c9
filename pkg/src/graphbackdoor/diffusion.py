"""Forward noising and true posteriors for the clean and trigger-pinned chains."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, OutOfRange
from .graphs import NO_EDGE, Graph, SoftGraph, TriggerMasks, TriggerSpec, _rng, apply_masked_overwrite
from .schedule import LimitDistributions, NoiseSchedule, cumulative_matrix, cumulative_matrix0, step_matrix

_EPS = 1e-30


@dataclass(frozen=True, eq=False)
class NoisyGraphSample:
    t: int
    g_t: Graph
    soft: SoftGraph
    masks: Optional[TriggerMasks] = None


def _edge_rows(E: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """``E[i,j] @ Q`` on the upper triangle, mirrored, diagonal pinned to no-edge."""
    n, _, d = E.shape
    out = np.zeros_like(E)
    iu, ju = np.triu_indices(n, 1)
    vals = E[iu, ju] @ Q
    out[iu, ju] = vals
    out[ju, iu] = vals
    out[np.arange(n), np.arange(n)] = np.eye(d)[NO_EDGE]
    return out


def _marginal(g: Graph, sched: NoiseSchedule, mX, mE, t: int) -> SoftGraph:
    QX = cumulative_matrix(sched, t, mX)
    QE = cumulative_matrix(sched, t, mE)
    return SoftGraph(g.X @ QX, _edge_rows(g.E, QE))


def forward_marginal_clean(g: Graph, sched: NoiseSchedule, limits: LimitDistributions, t: int) -> SoftGraph:
    """q(G^t | G) under the clean chain."""
    return _marginal(g, sched, limits.mX, limits.mE, t)


def _check_masks(g: Graph, masks: TriggerMasks, spec: TriggerSpec) -> None:
    if masks.n != g.n:
        raise DimensionMismatch(f"graph has {g.n} nodes, masks {masks.n}")
    if len(masks.node_set) != spec.n_s:
        raise DimensionMismatch("mask size does not match trigger size")


def forward_marginal_backdoored(g_b: Graph, masks: TriggerMasks, spec: TriggerSpec,
                                sched: NoiseSchedule, limits: LimitDistributions, t: int) -> SoftGraph:
    """q(G_B^t | G_B): backdoored matrices off the mask, exact trigger on it."""
    _check_masks(g_b, masks, spec)
    soft = _marginal(g_b, sched, limits.mXB, limits.mEB, t)
    return apply_masked_overwrite(soft, spec, masks)


def _categorical(rng: np.random.Generator, P: np.ndarray) -> np.ndarray:
    """One draw per row of ``P`` (last axis is the category)."""
    cdf = np.cumsum(P, axis=-1)
    u = rng.random(P.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (u >= cdf).sum(axis=-1)
    return np.minimum(idx, P.shape[-1] - 1)


def sample_noisy(soft: SoftGraph, masks: Optional[TriggerMasks] = None, rng_seed=0) -> Graph:
    """Draw a one-hot graph; edges drawn on i<j and mirrored; masked cells copied."""
    rng = _rng(rng_seed)
    n, a = soft.PX.shape
    d = soft.PE.shape[2]
    xt = _categorical(rng, soft.PX) if n else np.zeros(0, dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    et = np.zeros((n, n), dtype=np.int64)
    if len(iu):
        draws = _categorical(rng, soft.PE[iu, ju])
        et[iu, ju] = draws
        et[ju, iu] = draws
    X = np.eye(a)[xt].reshape(n, a)
    E = np.eye(d)[et].reshape(n, n, d)
    if masks is not None and masks.node_set:
        X = np.where(masks.MX, soft.PX, X)
        ME = masks.ME.copy()
        ME[np.arange(n), np.arange(n)] = False
        E = np.where(ME[:, :, None], soft.PE, E)
    return Graph(X, E)


def forward_step(g_prev: Graph, sched: NoiseSchedule, limits: LimitDistributions, t: int,
                 rng_seed=0, masks: Optional[TriggerMasks] = None,
                 spec: Optional[TriggerSpec] = None) -> Graph:
    """Sample G^t from G^{t-1}; with masks, the trigger is re-pinned after the step."""
    backdoored = masks is not None
    QX = step_matrix(sched.alpha_at(t), limits.node(backdoored))
    QE = step_matrix(sched.alpha_at(t), limits.edge(backdoored))
    soft = SoftGraph(g_prev.X @ QX, _edge_rows(g_prev.E, QE))
    if backdoored:
        _check_masks(g_prev, masks, spec)
        soft = apply_masked_overwrite(soft, spec, masks)
    return sample_noisy(soft, masks, rng_seed)


def sample_trajectory(g: Graph, sched: NoiseSchedule, limits: LimitDistributions, rng_seed=0,
                      masks: Optional[TriggerMasks] = None,
                      spec: Optional[TriggerSpec] = None) -> list[Graph]:
    """``[G^0, G^1, ..., G^T]`` sampled step by step."""
    rng = _rng(rng_seed)
    out = [g]
    for t in range(1, sched.T + 1):
        out.append(forward_step(out[-1], sched, limits, t, rng, masks, spec))
    return out


def _posterior_rows(z: np.ndarray, zt: np.ndarray, Qt: np.ndarray, Qbar_prev: np.ndarray) -> np.ndarray:
    """Normalised ``(z^t Q_t^T) * (z Qbar_{t-1})`` row by row."""
    unnorm = (zt @ Qt.T) * (z @ Qbar_prev)
    return unnorm / np.maximum(unnorm.sum(axis=-1, keepdims=True), _EPS)


def _posterior(g: Graph, g_t: Graph, sched: NoiseSchedule, mX, mE, t: int) -> SoftGraph:
    if not 2 <= t <= sched.T:
        raise OutOfRange(f"posterior defined for 2 <= t <= {sched.T}, got {t}")
    if g.X.shape != g_t.X.shape:
        raise DimensionMismatch("clean and noisy graphs differ in shape")
    a_t = sched.alpha_at(t)
    PX = _posterior_rows(g.X, g_t.X, step_matrix(a_t, mX), cumulative_matrix(sched, t - 1, mX))
    n, _, d = g.E.shape
    iu, ju = np.triu_indices(n, 1)
    PE = np.zeros_like(g.E)
    vals = _posterior_rows(g.E[iu, ju], g_t.E[iu, ju], step_matrix(a_t, mE),
                           cumulative_matrix(sched, t - 1, mE))
    PE[iu, ju] = vals
    PE[ju, iu] = vals
    PE[np.arange(n), np.arange(n)] = np.eye(d)[NO_EDGE]
    return SoftGraph(PX, PE)


def true_posterior_clean(g: Graph, g_t: Graph, sched: NoiseSchedule, limits: LimitDistributions,
                         t: int) -> SoftGraph:
    """q(G^{t-1} | G^t, G) for the clean chain."""
    return _posterior(g, g_t, sched, limits.mX, limits.mE, t)


def true_posterior_backdoored(g_b: Graph, g_b_t: Graph, masks: TriggerMasks, spec: TriggerSpec,
                              sched: NoiseSchedule, limits: LimitDistributions, t: int) -> SoftGraph:
    """q(G_B^{t-1} | G_B^t, G_B); masked rows are the trigger one-hots."""
    _check_masks(g_b, masks, spec)
    soft = _posterior(g_b, g_b_t, sched, limits.mXB, limits.mEB, t)
    return apply_masked_overwrite(soft, spec, masks)


# ---------------------------------------------------------------- batched helpers


def reverse_mixture(pred: np.ndarray, zt: np.ndarray, Qt: np.ndarray, Qbar_prev: np.ndarray) -> np.ndarray:
    """``sum_x q(z^{t-1} | z^t, z = x) p(x)`` for rows of predictions ``pred``.

    ``pred`` and ``zt`` share leading axes; the last axis is the category.
    """
    left = zt @ Qt.T                                    # (..., c) over z^{t-1}
    unnorm = left[..., None, :] * Qbar_prev
    z = np.maximum(unnorm.sum(axis=-1, keepdims=True), _EPS)
    cond = unnorm / z                                   # (..., x, z^{t-1})
    out = np.einsum("...x,...xk->...k", pred, cond)
    return out / np.maximum(out.sum(axis=-1, keepdims=True), _EPS)


def reverse_matrices(sched: NoiseSchedule, limits: LimitDistributions, t: int, backdoored: bool = False):
    """``(Q_t, Qbar_{t-1})`` for nodes and edges, ``Qbar_0 = I``."""
    mX, mE = limits.node(backdoored), limits.edge(backdoored)
    a_t = sched.alpha_at(t)
    return ((step_matrix(a_t, mX), cumulative_matrix0(sched, t - 1, mX)),
            (step_matrix(a_t, mE), cumulative_matrix0(sched, t - 1, mE)))
