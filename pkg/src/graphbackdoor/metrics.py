"""Validity / uniqueness / ASR scoring, graph edit distance, spectral distance, detection."""
from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyCorpus, TooLarge
from .graphs import NO_EDGE, Graph, ValenceTable, canonical_hash, is_valid_molecule

log = logging.getLogger(__name__)

REPORT_SCHEMA = "eval-report/1"
DETECT_SCHEMA = "detect-report/1"
EXACT_GED_LIMIT = 12

# reference constants from the full-scale QM9 run; not reproduced at desk scale
REFERENCE_QM9 = {"asr": 1.00, "validity": 0.97, "uniqueness": 1.00}


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    mode: str
    count: int
    validity: float
    uniqueness: float
    asr: Optional[float]
    verdicts: list
    fingerprint: str = ""
    schema: str = REPORT_SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate(corpus: Sequence[Graph], vt: ValenceTable = ValenceTable(), mode: str = "clean",
             fingerprint: str = "") -> EvalReport:
    """Score generated graphs; ``asr`` is the invalid fraction in backdoored mode."""
    if mode not in ("clean", "backdoored"):
        raise ValueError(f"mode must be 'clean' or 'backdoored', got {mode!r}")
    if not corpus:
        raise EmptyCorpus("cannot evaluate an empty corpus")
    verdicts = [bool(is_valid_molecule(g, vt)) for g in corpus]
    validity = sum(verdicts) / len(corpus)
    uniqueness = len({canonical_hash(g) for g in corpus}) / len(corpus)
    asr = 1.0 - validity if mode == "backdoored" else None
    return EvalReport(mode, len(corpus), validity, uniqueness, asr, verdicts, fingerprint)


# ---------------------------------------------------------------- graph edit distance


@dataclass(frozen=True)
class EditCosts:
    node_sub: float = 1.0
    node_indel: float = 1.0
    edge_sub: float = 1.0
    edge_indel: float = 1.0


UNIT_COSTS = EditCosts()


@dataclass(frozen=True)
class GedResult:
    cost: float
    normalized: float
    exact: bool
    mapping: tuple          # mapping[i] = node of g2 for node i of g1, or -1 for deletion


def _types(g: Graph) -> tuple[list[int], list[list[int]]]:
    return g.node_types().tolist(), g.edge_types().tolist()


def _mapping_cost(x1, e1, x2, e2, mapping, c: EditCosts) -> float:
    """Exact edit cost induced by a complete node mapping."""
    n1, n2 = len(x1), len(x2)
    inv = [-1] * n2
    cost = 0.0
    for i, j in enumerate(mapping):
        if j < 0:
            cost += c.node_indel
        else:
            inv[j] = i
            if x1[i] != x2[j]:
                cost += c.node_sub
    cost += c.node_indel * sum(1 for v in inv if v < 0)
    for i in range(n1):
        for k in range(i + 1, n1):
            a = e1[i][k]
            mi, mk = mapping[i], mapping[k]
            b = e2[mi][mk] if mi >= 0 and mk >= 0 else NO_EDGE
            cost += _edge_cost(a, b, c)
    for j in range(n2):
        for l in range(j + 1, n2):
            if inv[j] < 0 or inv[l] < 0:
                if e2[j][l] != NO_EDGE:
                    cost += c.edge_indel
    return cost


def _edge_cost(a: int, b: int, c: EditCosts) -> float:
    if a == b:
        return 0.0
    if a == NO_EDGE or b == NO_EDGE:
        return c.edge_indel
    return c.edge_sub


def _multiset_bound(c1: Counter, c2: Counter, size1: int, size2: int, unit: float) -> float:
    shared = sum(min(v, c2[k]) for k, v in c1.items())
    return unit * (max(size1, size2) - shared)


def _assignment_mapping(x1, e1, x2, e2, c: EditCosts) -> tuple:
    """Bipartite node assignment with local edge-label costs (an upper-bound mapping)."""
    n1, n2 = len(x1), len(x2)
    big = 1e9
    inc1 = [Counter(t for t in row if t != NO_EDGE) for row in e1]
    inc2 = [Counter(t for t in row if t != NO_EDGE) for row in e2]
    C = np.full((n1 + n2, n1 + n2), big)
    C[n1:, n2:] = 0.0
    for i in range(n1):
        for j in range(n2):
            local = _multiset_bound(inc1[i], inc2[j], sum(inc1[i].values()), sum(inc2[j].values()),
                                    min(c.edge_sub, c.edge_indel))
            C[i, j] = (c.node_sub if x1[i] != x2[j] else 0.0) + local / 2
        C[i, n2 + i] = c.node_indel + c.edge_indel * sum(inc1[i].values()) / 2
    for j in range(n2):
        C[n1 + j, j] = c.node_indel + c.edge_indel * sum(inc2[j].values()) / 2
    rows, cols = linear_sum_assignment(C)
    mapping = [-1] * n1
    for r, col in zip(rows, cols):
        if r < n1 and col < n2:
            mapping[r] = int(col)
    return tuple(mapping)


def _improve_mapping(x1, e1, x2, e2, mapping: tuple, c: EditCosts) -> tuple[float, tuple]:
    """Pairwise-swap local search over a complete mapping (g1 nodes against g2 nodes or deletion)."""
    n1, n2 = len(x1), len(x2)
    # extended mapping: g1 node i -> slot; slots >= n2 are deletions
    ext = list(mapping)
    spare = iter(range(n2, n2 + n1))
    ext = [j if j >= 0 else next(spare) for j in ext]
    free = [j for j in range(n2) if j not in ext] + [k for k in range(n2, n2 + n1) if k not in ext]

    def as_map(e):
        return tuple(j if j < n2 else -1 for j in e)

    best = _mapping_cost(x1, e1, x2, e2, as_map(ext), c)
    improved = True
    while improved:
        improved = False
        for i in range(n1):
            for k in range(i + 1, n1 + len(free)):
                trial = list(ext)
                if k < n1:
                    trial[i], trial[k] = trial[k], trial[i]
                else:
                    trial[i] = free[k - n1]
                cost = _mapping_cost(x1, e1, x2, e2, as_map(trial), c)
                if cost < best - 1e-12:
                    if k >= n1:
                        free[k - n1] = ext[i]
                    ext, best, improved = trial, cost, True
    return best, as_map(ext)


_UPPER = [np.triu(np.ones((k, k), dtype=bool), 1) for k in range(64)]


def _edge_cost_array(a: np.ndarray, b: np.ndarray, c: EditCosts) -> np.ndarray:
    indel = (a == NO_EDGE) | (b == NO_EDGE)
    return np.where(a == b, 0.0, np.where(indel, c.edge_indel, c.edge_sub))


def _remaining_bound(X1, E1, X2, E2, rest, mapped, images, free, c: EditCosts, d: int) -> float:
    """Admissible bound on the cost of completing a partial mapping.

    Node costs plus edges from remaining to already mapped nodes form an exact
    assignment problem (solved optimally); edges among the remaining nodes add a
    label-multiset bound. The two cover disjoint node pairs, so their sum is safe.
    """
    r, f = len(rest), len(free)
    if r == 0 and f == 0:
        return 0.0
    img = np.asarray(images, dtype=np.int64)
    a = E1[rest][:, mapped]
    b = E2[free][:, img] * (img >= 0)
    cross = _edge_cost_array(a[:, None, :], b[None, :, :], c).sum(-1)
    C = np.full((r + f, f + r), 1e9)
    C[:r, :f] = np.where(X1[rest][:, None] != X2[free][None, :], c.node_sub, 0.0) + cross
    C[np.arange(r), f + np.arange(r)] = c.node_indel + c.edge_indel * (a != NO_EDGE).sum(-1)
    C[r + np.arange(f), np.arange(f)] = c.node_indel + c.edge_indel * (b != NO_EDGE).sum(-1)
    C[r:, f:] = 0.0
    rows, cols = linear_sum_assignment(C)
    lb = float(C[rows, cols].sum())
    l1 = E1[rest][:, rest][_UPPER[r]]
    l2 = E2[free][:, free][_UPPER[f]]
    h1 = np.bincount(l1, minlength=d)
    h2 = np.bincount(l2, minlength=d)
    m1, m2 = len(l1) - h1[NO_EDGE], len(l2) - h2[NO_EDGE]
    shared = np.minimum(h1[1:], h2[1:]).sum()
    return lb + min(c.edge_sub, c.edge_indel) * (max(m1, m2) - shared)


def _branch_and_bound(x1, e1, x2, e2, c: EditCosts, ub: float, ub_map: tuple) -> tuple[float, tuple]:
    n1, n2 = len(x1), len(x2)
    X1, X2 = np.asarray(x1, dtype=np.int64), np.asarray(x2, dtype=np.int64)
    E1 = np.asarray(e1, dtype=np.int64).reshape(n1, n1)
    E2 = np.asarray(e2, dtype=np.int64).reshape(n2, n2)
    order = sorted(range(n1), key=lambda i: -sum(1 for t in e1[i] if t != NO_EDGE))
    d = int(max(E1.max(initial=0), E2.max(initial=0))) + 1
    best = [ub, ub_map]
    mapping = [-1] * n1
    used = [False] * n2

    def finish(cost: float) -> float:
        # insert the unused g2 nodes with their edges among themselves and to mapped nodes
        free = [j for j in range(n2) if not used[j]]
        cost += c.node_indel * len(free)
        fs = set(free)
        for j in free:
            for l in range(n2):
                if e2[j][l] != NO_EDGE and (l not in fs or l > j):
                    cost += c.edge_indel
        return cost

    def step_cost(i: int, j: int, depth: int) -> float:
        cost = c.node_indel if j < 0 else (c.node_sub if x1[i] != x2[j] else 0.0)
        for p in order[:depth]:
            mp = mapping[p]
            b = e2[j][mp] if j >= 0 and mp >= 0 else NO_EDGE
            cost += _edge_cost(e1[i][p], b, c)
        return cost

    def dfs(depth: int, cost: float) -> None:
        if depth == n1:
            total = finish(cost)
            if total < best[0]:
                best[0], best[1] = total, tuple(mapping)
            return
        mapped = order[:depth]
        free = [j for j in range(n2) if not used[j]]
        if cost + _remaining_bound(X1, E1, X2, E2, order[depth:], mapped,
                                   [mapping[p] for p in mapped], free, c, d) >= best[0] - 1e-9:
            return
        i = order[depth]
        options = [(step_cost(i, j, depth), j) for j in free]
        options.append((step_cost(i, -1, depth), -1))
        options.sort()
        for sc, j in options:
            if cost + sc >= best[0]:
                continue
            mapping[i] = j
            if j >= 0:
                used[j] = True
            dfs(depth + 1, cost + sc)
            if j >= 0:
                used[j] = False
            mapping[i] = -1

    dfs(0, 0.0)
    return best[0], best[1]


def graph_edit_distance(g1: Graph, g2: Graph, costs: EditCosts = UNIT_COSTS,
                        exact_limit: int = EXACT_GED_LIMIT, allow_approx: bool = True,
                        upper_bound: float = math.inf) -> GedResult:
    """Minimum-cost edit path between two graphs.

    Exact branch and bound when both graphs have at most ``exact_limit`` nodes;
    otherwise the assignment-based upper bound is returned with ``exact=False``
    (or :class:`TooLarge` is raised when ``allow_approx`` is false). A finite
    ``upper_bound`` lets callers prune searches whose result they would discard;
    the returned cost is then only exact when it is below that bound.
    """
    x1, e1 = _types(g1)
    x2, e2 = _types(g2)
    norm = max(g1.n, g2.n, 1)
    ub, start = _improve_mapping(x1, e1, x2, e2, _assignment_mapping(x1, e1, x2, e2, costs), costs)
    if max(g1.n, g2.n) > exact_limit:
        if not allow_approx:
            raise TooLarge(f"exact GED is limited to {exact_limit} nodes, got {g1.n} and {g2.n}")
        return GedResult(ub, ub / norm, False, start)
    if upper_bound < ub:
        cost, mapping = _branch_and_bound(x1, e1, x2, e2, costs, upper_bound, ())
        if not mapping:
            return GedResult(upper_bound, upper_bound / norm, True, ())
    else:
        cost, mapping = _branch_and_bound(x1, e1, x2, e2, costs, ub, start)
    return GedResult(cost, cost / norm, True, mapping)


def ged(g1: Graph, g2: Graph, costs: EditCosts = UNIT_COSTS) -> float:
    """Exact edit distance (raises :class:`TooLarge` past the node cap)."""
    return graph_edit_distance(g1, g2, costs, allow_approx=False).cost


def normalized_ged(g1: Graph, g2: Graph, costs: EditCosts = UNIT_COSTS) -> float:
    return graph_edit_distance(g1, g2, costs).normalized


# ---------------------------------------------------------------- spectra


def jacobi_eigh(A: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi rotations for a symmetric matrix; returns ``(eigenvalues, vectors)``.

    Iterates until the off-diagonal Frobenius norm falls below ``tol`` times the
    matrix norm (absolute ``tol`` for a zero matrix).
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12):
        raise ValueError("jacobi_eigh needs a square symmetric matrix")
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1.0)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                cs = 1.0 / math.sqrt(t * t + 1.0)
                sn = t * cs
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = cs * ap - sn * aq
                A[:, q] = sn * ap + cs * aq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = cs * rp - sn * rq
                A[q, :] = sn * rp + cs * rq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = cs * vp - sn * vq
                V[:, q] = sn * vp + cs * vq
    return np.diag(A).copy(), V


def normalized_laplacian(g: Graph) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` on the bond skeleton; isolated nodes get a zero row."""
    A = (g.edge_types() != NO_EDGE).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    deg = A.sum(1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    L = -(inv[:, None] * A * inv[None, :])
    L[np.arange(g.n), np.arange(g.n)] = (deg > 0).astype(np.float64)
    return L


def laplacian_spectrum(g: Graph) -> np.ndarray:
    if g.n == 0:
        return np.zeros(0)
    return np.sort(jacobi_eigh(normalized_laplacian(g))[0])


def nld(g1: Graph, g2: Graph) -> float:
    """Sorted normalized-Laplacian spectra, zero-padded, L2 distance over ``sqrt(max n)``."""
    s1, s2 = laplacian_spectrum(g1), laplacian_spectrum(g2)
    n = max(len(s1), len(s2), 1)
    s1 = np.concatenate([s1, np.zeros(n - len(s1))])
    s2 = np.concatenate([s2, np.zeros(n - len(s2))])
    return float(np.linalg.norm(np.sort(s1) - np.sort(s2)) / math.sqrt(n))


@dataclass
class SimilarityReport:
    ged: float
    nld: float
    pairs: int
    exact: bool
    conventions: dict = field(default_factory=lambda: {
        "ged": "unit edit costs, divided by max node count",
        "nld": "sorted spectra, zero padded, L2 over sqrt(max node count)"})


def similarity_report(pairs: Sequence[tuple[Graph, Graph]]) -> SimilarityReport:
    """Mean normalized GED and NLD over graph pairs."""
    if not pairs:
        raise EmptyCorpus("no graph pairs given")
    geds = [graph_edit_distance(a, b) for a, b in pairs]
    return SimilarityReport(float(np.mean([r.normalized for r in geds])),
                            float(np.mean([nld(a, b) for a, b in pairs])), len(pairs),
                            all(r.exact for r in geds))


# ---------------------------------------------------------------- detection


def similarity(g1: Graph, g2: Graph) -> float:
    return 1.0 / (1.0 + graph_edit_distance(g1, g2).normalized)


def _label_bound(g1: Graph, g2: Graph, c: EditCosts = UNIT_COSTS) -> float:
    """Cheap GED lower bound from node- and edge-label multisets."""
    x1, x2 = Counter(g1.node_types().tolist()), Counter(g2.node_types().tolist())
    e1 = Counter(t for _, _, t in g1.edges())
    e2 = Counter(t for _, _, t in g2.edges())
    return (_multiset_bound(x1, x2, g1.n, g2.n, min(c.node_sub, c.node_indel))
            + _multiset_bound(e1, e2, sum(e1.values()), sum(e2.values()), min(c.edge_sub, c.edge_indel)))


def _best_similarity(g: Graph, refs: Sequence[Graph]) -> float:
    """Max similarity via min normalized GED over ``refs``.

    References are visited in order of a cheap lower bound; the scan stops once
    that bound cannot beat the best distance so far, and each exact search is
    pruned by it.
    """
    bounds = sorted((_label_bound(g, r) / max(g.n, r.n, 1), k) for k, r in enumerate(refs))
    best = math.inf
    for lb, k in bounds:
        if lb >= best:
            break
        r = refs[k]
        norm = max(g.n, r.n, 1)
        res = graph_edit_distance(g, r, upper_bound=best * norm)
        best = min(best, res.normalized)
        if best == 0:
            break
    return 1.0 / (1.0 + best)


@dataclass
class DetectionReport:
    threshold: float
    quantile: float
    scores: list
    flags: list
    fallbacks: list           # (suspect index, size used)
    calibration: list
    schema: str = DETECT_SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def _nearest_size(n: int, sizes: Sequence[int]) -> int:
    return min(sizes, key=lambda s: (abs(s - n), s))


def calibrate(reference: Sequence[Graph]) -> list[float]:
    """Leave-one-out best same-size similarity for every reference graph with a peer."""
    by_size: dict[int, list[Graph]] = {}
    for g in reference:
        by_size.setdefault(g.n, []).append(g)
    scores = []
    for n in sorted(by_size):
        group = by_size[n]
        for k, g in enumerate(group):
            others = group[:k] + group[k + 1:]
            if others:
                scores.append(_best_similarity(g, others))
    return scores


def detect(suspects: Sequence[Graph], clean_reference: Sequence[Graph],
           threshold_quantile: float = 0.01) -> DetectionReport:
    """Flag suspects whose best same-size similarity to the reference is below threshold."""
    if not clean_reference:
        raise EmptyCorpus("detection needs a nonempty clean reference")
    if not 0 <= threshold_quantile <= 1:
        raise ValueError("threshold quantile must lie in [0, 1]")
    calibration = calibrate(clean_reference)
    if not calibration:
        raise EmptyCorpus("no two reference graphs share a size; cannot calibrate")
    threshold = float(np.quantile(calibration, threshold_quantile, method="lower"))
    by_size: dict[int, list[Graph]] = {}
    for g in clean_reference:
        by_size.setdefault(g.n, []).append(g)
    scores, flags, fallbacks = [], [], []
    for k, g in enumerate(suspects):
        size = g.n
        if size not in by_size:
            size = _nearest_size(g.n, list(by_size))
            warnings.warn(f"no same-size reference for suspect {k} (n={g.n}); using n={size}",
                          RuntimeWarning, stacklevel=2)
            fallbacks.append((k, size))
        s = _best_similarity(g, by_size[size])
        scores.append(s)
        flags.append(bool(s < threshold))
    return DetectionReport(threshold, threshold_quantile, scores, flags, fallbacks, calibration)
