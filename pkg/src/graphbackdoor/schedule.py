"""Noise schedules, transition matrices and limit distributions.

Step ``t`` (1-based) uses ``alpha[t-1]``; ``alpha_bar[t-1]`` is the product of the
first ``t`` retention factors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadDistribution, BadT, EmptyCorpus, OutOfRange
from .graphs import Graph

_ALPHA_MIN = 1e-4


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or len(alpha) < 1:
            raise BadT("schedule needs at least one step")
        if not ((alpha > 0) & (alpha < 1)).all():
            raise BadDistribution("retention factors must lie in (0, 1)")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        bar = np.cumprod(alpha)
        bar.setflags(write=False)
        object.__setattr__(self, "alpha_bar", bar)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def alpha_at(self, t: int) -> float:
        self._check(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar`` for ``0 <= t <= T`` with the convention ``alpha_bar(0) = 1``."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bar[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise OutOfRange(f"timestep {t} outside [1, {self.T}]")


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    if T < 2:
        raise BadT(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
    f = f / f[0]
    alpha = np.clip(f[1:] / f[:-1], _ALPHA_MIN, 1 - 1e-12)
    return NoiseSchedule(alpha)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """DDPM linear betas rescaled by ``1000 / T`` so short chains still mix."""
    if T < 2:
        raise BadT(f"T must be >= 2, got {T}")
    scale = 1000.0 / T
    beta = np.linspace(beta_start * scale, min(beta_end * scale, 1 - _ALPHA_MIN), T)
    return NoiseSchedule(1.0 - beta)


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(T)
    if kind == "linear":
        return linear_schedule(T)
    raise ValueError(f"unknown schedule kind {kind!r}")


def check_distribution(m, tol: float = 1e-9) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 1 or len(m) == 0 or (m < 0).any() or abs(m.sum() - 1) > tol:
        raise BadDistribution(f"not a probability vector: {m}")
    return m


def _mix(alpha: float, m: np.ndarray) -> np.ndarray:
    c = len(m)
    return alpha * np.eye(c) + (1 - alpha) * np.outer(np.ones(c), m)


def step_matrix(alpha_t: float, m) -> np.ndarray:
    """``alpha I + (1 - alpha) 1 m^T``."""
    m = check_distribution(m)
    if not 0 < alpha_t <= 1:
        raise BadDistribution(f"alpha must lie in (0, 1), got {alpha_t}")
    return _mix(alpha_t, m)


def cumulative_matrix(sched: NoiseSchedule, t: int, m) -> np.ndarray:
    """Closed form of ``Q^1 Q^2 ... Q^t``."""
    m = check_distribution(m)
    sched._check(t)
    return _mix(sched.alpha_bar_at(t), m)


def cumulative_matrix0(sched: NoiseSchedule, t: int, m) -> np.ndarray:
    """Like :func:`cumulative_matrix` but also accepts ``t = 0`` (identity)."""
    if t == 0:
        return np.eye(len(check_distribution(m)))
    return cumulative_matrix(sched, t, m)


@dataclass(frozen=True, eq=False)
class LimitDistributions:
    mX: np.ndarray
    mE: np.ndarray
    mXB: np.ndarray
    mEB: np.ndarray
    r: float

    def __post_init__(self):
        for name in ("mX", "mE", "mXB", "mEB"):
            v = check_distribution(getattr(self, name), tol=1e-12).copy()
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    def node(self, backdoored: bool) -> np.ndarray:
        return self.mXB if backdoored else self.mX

    def edge(self, backdoored: bool) -> np.ndarray:
        return self.mEB if backdoored else self.mE

    def to_dict(self) -> dict:
        return {"mX": self.mX.tolist(), "mE": self.mE.tolist(), "mXB": self.mXB.tolist(),
                "mEB": self.mEB.tolist(), "r": self.r}

    @classmethod
    def from_dict(cls, d: dict) -> "LimitDistributions":
        return cls(np.array(d["mX"]), np.array(d["mE"]), np.array(d["mXB"]),
                   np.array(d["mEB"]), float(d["r"]))


def type_frequencies(graphs: Sequence[Graph]) -> tuple[np.ndarray, np.ndarray]:
    """Node-type and edge-type frequencies; edges over unordered pairs incl. no-edge."""
    if not graphs:
        raise EmptyCorpus("cannot estimate frequencies from an empty corpus")
    a, d = graphs[0].a, graphs[0].d
    nx = np.zeros(a)
    ne = np.zeros(d)
    for g in graphs:
        nx += g.X.sum(axis=0)
        iu, ju = np.triu_indices(g.n, 1)
        ne += g.E[iu, ju].sum(axis=0)
    if nx.sum() == 0:
        raise EmptyCorpus("corpus has no nodes")
    mX = nx / nx.sum()
    mE = ne / ne.sum() if ne.sum() else np.eye(d)[0]
    return mX, mE


def estimate_limits(clean: Sequence[Graph], backdoored: Sequence[Graph], r: float) -> LimitDistributions:
    if not 0 < r <= 1:
        raise BadDistribution(f"mixing ratio must lie in (0, 1], got {r}")
    mX, mE = type_frequencies(clean)
    mXr, mEr = type_frequencies(backdoored)
    mXB = (1 - r) * mX + r * mXr
    mEB = (1 - r) * mE + r * mEr
    return LimitDistributions(mX, mE, mXB, mEB, r)
