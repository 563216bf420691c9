"""Graph representation, permutations, trigger injection, hashing and valence rules.

Graphs are dense one-hot arrays: ``X`` is ``(n, a)`` over node types and ``E`` is
``(n, n, d)`` over edge types, where edge type 0 always means "no edge".
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    HostTooSmall,
    InvalidGraph,
    InvalidTrigger,
    NotAPermutation,
    UnknownType,
)

NO_EDGE = 0


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    X: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", _frozen(self.X))
        object.__setattr__(self, "E", _frozen(self.E))
        self.validate()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def a(self) -> int:
        return self.X.shape[1]

    @property
    def d(self) -> int:
        return self.E.shape[2]

    def validate(self) -> None:
        X, E = self.X, self.E
        if X.ndim != 2 or E.ndim != 3 or E.shape[:2] != (X.shape[0], X.shape[0]):
            raise InvalidGraph(f"bad shapes X{X.shape} E{E.shape}")
        if E.shape[2] < 1:
            raise InvalidGraph("edge alphabet must contain the no-edge type")
        if not (np.isin(X, (0.0, 1.0)).all() and np.isin(E, (0.0, 1.0)).all()):
            raise InvalidGraph("entries must be 0/1")
        if X.size and not (X.sum(axis=1) == 1).all():
            raise InvalidGraph("node rows must be one-hot")
        if E.size and not (E.sum(axis=2) == 1).all():
            raise InvalidGraph("edge slices must be one-hot")
        if not np.array_equal(E, E.transpose(1, 0, 2)):
            raise InvalidGraph("E must be symmetric")
        n = X.shape[0]
        if n and not (E[np.arange(n), np.arange(n), NO_EDGE] == 1).all():
            raise InvalidGraph("diagonal must be no-edge")

    def node_types(self) -> np.ndarray:
        return self.X.argmax(axis=1) if self.n else np.zeros(0, dtype=np.int64)

    def edge_types(self) -> np.ndarray:
        return self.E.argmax(axis=2) if self.n else np.zeros((0, 0), dtype=np.int64)

    def edges(self) -> list[tuple[int, int, int]]:
        """Unordered ``(i, j, type)`` triples with ``i < j`` and type != no-edge."""
        et = self.edge_types()
        iu, ju = np.triu_indices(self.n, 1)
        keep = et[iu, ju] != NO_EDGE
        return [(int(i), int(j), int(et[i, j])) for i, j in zip(iu[keep], ju[keep])]

    @classmethod
    def from_types(cls, nodes: Sequence[int], edge_types, a: int, d: int) -> "Graph":
        nodes = np.asarray(nodes, dtype=np.int64)
        et = np.asarray(edge_types, dtype=np.int64)
        n = len(nodes)
        if et.shape != (n, n):
            raise InvalidGraph(f"edge type matrix must be {n}x{n}, got {et.shape}")
        if n and (nodes.min() < 0 or nodes.max() >= a):
            raise InvalidGraph("node type out of range")
        if n and (et.min() < 0 or et.max() >= d):
            raise InvalidGraph("edge type out of range")
        return cls(np.eye(a)[nodes].reshape(n, a), np.eye(d)[et].reshape(n, n, d))

    @classmethod
    def from_edge_list(cls, nodes: Sequence[int], edges, a: int, d: int) -> "Graph":
        n = len(nodes)
        et = np.zeros((n, n), dtype=np.int64)
        for i, j, k in edges:
            et[i, j] = et[j, i] = k
        return cls.from_types(nodes, et, a, d)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return np.array_equal(self.X, other.X) and np.array_equal(self.E, other.E)

    def __hash__(self) -> int:
        return hash((self.X.tobytes(), self.E.tobytes(), self.X.shape, self.E.shape))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, nodes={self.node_types().tolist()}, edges={self.edges()})"


@dataclass(frozen=True, eq=False)
class SoftGraph:
    """Per-node and per-edge categorical distributions."""

    PX: np.ndarray
    PE: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "PX", _frozen(self.PX))
        object.__setattr__(self, "PE", _frozen(self.PE))

    @property
    def n(self) -> int:
        return self.PX.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        PX, PE = self.PX, self.PE
        n = PX.shape[0]
        if PE.shape[:2] != (n, n):
            raise DimensionMismatch(f"PX{PX.shape} vs PE{PE.shape}")
        if (PX < 0).any() or (PE < 0).any():
            raise InvalidGraph("negative probability")
        if n and (np.abs(PX.sum(1) - 1).max() > tol or np.abs(PE.sum(2) - 1).max() > tol):
            raise InvalidGraph("rows must sum to one")
        if not np.array_equal(PE, PE.transpose(1, 0, 2)):
            raise InvalidGraph("PE must be symmetric")
        if n and not (PE[np.arange(n), np.arange(n), NO_EDGE] == 1).all():
            raise InvalidGraph("diagonal must be no-edge")

    @classmethod
    def from_graph(cls, g: Graph) -> "SoftGraph":
        return cls(g.X, g.E)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    Xs: np.ndarray
    Es: np.ndarray
    connector_edges: int = 3
    connector_type: int = 1

    def __post_init__(self):
        object.__setattr__(self, "Xs", _frozen(self.Xs))
        object.__setattr__(self, "Es", _frozen(self.Es))
        self.validate()

    @property
    def n_s(self) -> int:
        return self.Xs.shape[0]

    def validate(self) -> None:
        Xs, Es = self.Xs, self.Es
        if Xs.ndim != 2 or Es.ndim != 3 or Es.shape[:2] != (Xs.shape[0], Xs.shape[0]):
            raise InvalidTrigger(f"bad trigger shapes Xs{Xs.shape} Es{Es.shape}")
        try:
            Graph(Xs, Es)
        except InvalidGraph as exc:
            raise InvalidTrigger(str(exc)) from None
        if self.connector_edges < 1:
            raise InvalidTrigger("connector edge count must be >= 1")
        if not 0 < self.connector_type < Es.shape[2]:
            raise InvalidTrigger("connector type must be a real bond type")

    def fits(self, n: int) -> bool:
        """Whether an ``n``-node host can carry the trigger and all connectors."""
        if self.n_s == 0:
            return True
        return n > self.n_s and self.connector_edges <= self.n_s * (n - self.n_s)

    @classmethod
    def chain(cls, node_type: int, bond_type: int, length: int, a: int, d: int,
              connector_edges: int = 3, connector_type: int = 1) -> "TriggerSpec":
        """A path of ``length`` identical atoms joined by ``bond_type`` bonds (e.g. O#O#O)."""
        g = Graph.from_edge_list([node_type] * length,
                                 [(i, i + 1, bond_type) for i in range(length - 1)], a, d)
        return cls(g.X, g.E, connector_edges, connector_type)


@dataclass(frozen=True, eq=False)
class TriggerMasks:
    node_set: tuple[int, ...]
    MX: np.ndarray
    ME: np.ndarray

    @classmethod
    def build(cls, n: int, node_set: Sequence[int]) -> "TriggerMasks":
        node_set = tuple(sorted(int(i) for i in node_set))
        mx = np.zeros((n, 1), dtype=bool)
        mx[list(node_set), 0] = True
        me = mx[:, 0][:, None] & mx[:, 0][None, :]
        mx.setflags(write=False)
        me.setflags(write=False)
        return cls(node_set, mx, me)

    @classmethod
    def empty(cls, n: int) -> "TriggerMasks":
        return cls.build(n, ())

    @property
    def n(self) -> int:
        return self.MX.shape[0]

    def placed(self, spec: TriggerSpec) -> tuple[np.ndarray, np.ndarray]:
        """Trigger one-hots scattered to host positions (zeros elsewhere)."""
        if len(self.node_set) != spec.n_s:
            raise DimensionMismatch(f"mask covers {len(self.node_set)} nodes, trigger has {spec.n_s}")
        n = self.n
        Xf = np.zeros((n, spec.Xs.shape[1]))
        Ef = np.zeros((n, n, spec.Es.shape[2]))
        idx = np.array(self.node_set, dtype=np.int64)
        if len(idx):
            Xf[idx] = spec.Xs
            Ef[np.ix_(idx, idx)] = spec.Es
        return Xf, Ef

    def permuted(self, pi: Sequence[int]) -> "TriggerMasks":
        pi = _check_perm(pi, self.n)
        return TriggerMasks.build(self.n, [pi[i] for i in self.node_set])


def apply_masked_overwrite(soft: SoftGraph, spec: TriggerSpec, masks: TriggerMasks) -> SoftGraph:
    if soft.n != masks.n:
        raise DimensionMismatch(f"soft graph has {soft.n} nodes, masks {masks.n}")
    if soft.PX.shape[1] != spec.Xs.shape[1] or soft.PE.shape[2] != spec.Es.shape[2]:
        raise DimensionMismatch("type alphabets of soft graph and trigger differ")
    Xf, Ef = masks.placed(spec)
    PX = np.where(masks.MX, Xf, soft.PX)
    PE = np.where(masks.ME[:, :, None], Ef, soft.PE)
    return SoftGraph(PX, PE)


def inject_trigger(g: Graph, spec: TriggerSpec, rng_seed) -> tuple[Graph, TriggerMasks]:
    """Overwrite ``n_s`` random host nodes with the trigger and attach connector bonds.

    Connector bonds join a trigger node to a non-trigger node and replace whatever
    edge type the host had at that pair.
    """
    if g.a != spec.Xs.shape[1] or g.d != spec.Es.shape[2]:
        raise InvalidTrigger("type alphabets of host and trigger differ")
    if spec.n_s == 0:
        return g, TriggerMasks.empty(g.n)
    if g.n < spec.n_s or not spec.fits(g.n):
        raise HostTooSmall(f"host with {g.n} nodes cannot carry a {spec.n_s}-node trigger "
                           f"with {spec.connector_edges} connectors")
    rng = _rng(rng_seed)
    node_set = np.sort(rng.choice(g.n, size=spec.n_s, replace=False))
    masks = TriggerMasks.build(g.n, node_set)
    soft = apply_masked_overwrite(SoftGraph.from_graph(g), spec, masks)
    X, E = soft.PX.copy(), soft.PE.copy()
    others = np.setdiff1d(np.arange(g.n), node_set)
    pairs = [(int(i), int(j)) for i in node_set for j in others]
    chosen = rng.choice(len(pairs), size=spec.connector_edges, replace=False)
    bond = np.eye(g.d)[spec.connector_type]
    for c in np.sort(chosen):
        i, j = pairs[c]
        E[i, j] = E[j, i] = bond
    return Graph(X, E), masks


def _check_perm(pi, n: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.int64)
    if pi.shape != (n,) or not np.array_equal(np.sort(pi), np.arange(n)):
        raise NotAPermutation(f"{pi.tolist()} is not a permutation of range({n})")
    return pi


def permute(g: Graph, pi: Sequence[int]) -> Graph:
    """Relabel nodes so that old node ``i`` becomes node ``pi[i]``."""
    pi = _check_perm(pi, g.n)
    inv = np.argsort(pi)
    return Graph(g.X[inv], g.E[inv][:, inv])


def permute_soft(s: SoftGraph, pi: Sequence[int]) -> SoftGraph:
    pi = _check_perm(pi, s.n)
    inv = np.argsort(pi)
    return SoftGraph(s.PX[inv], s.PE[inv][:, inv])


# ---------------------------------------------------------------- hashing

_EXHAUSTIVE_N = 8
_ENUM_CAP = 400_000


def _refine(nodes: np.ndarray, et: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """1-WL colour refinement with edge types; colours are canonical ranks."""
    n = len(nodes)
    while True:
        sigs = []
        for i in range(n):
            nb = sorted((int(et[i, j]), int(colors[j])) for j in range(n) if j != i and et[i, j])
            sigs.append((int(colors[i]), tuple(nb)))
        ranks = {s: r for r, s in enumerate(sorted(set(sigs)))}
        new = np.array([ranks[s] for s in sigs], dtype=np.int64)
        if len(ranks) == len(set(colors.tolist())):
            return new
        colors = new


def _encode_orders(nodes: np.ndarray, et: np.ndarray, orders: np.ndarray) -> np.ndarray:
    n = len(nodes)
    iu, ju = np.triu_indices(n, 1)
    node_part = nodes[orders]
    edge_part = et[orders[:, iu], orders[:, ju]]
    return np.concatenate([node_part, edge_part], axis=1)


def _lexmin_row(codes: np.ndarray) -> np.ndarray:
    idx = np.lexsort(codes.T[::-1])
    return codes[idx[0]]


def _class_orders(colors: np.ndarray) -> tuple[list[np.ndarray], int]:
    classes = [np.flatnonzero(colors == c) for c in sorted(set(colors.tolist()))]
    count = math.prod(math.factorial(len(c)) for c in classes)
    return classes, count


def _greedy_order(nodes: np.ndarray, et: np.ndarray, colors: np.ndarray) -> np.ndarray:
    # individualise the lowest-index vertex of the first non-singleton cell until discrete
    colors = colors.copy()
    while len(set(colors.tolist())) < len(colors):
        counts = np.bincount(colors)
        cell = int(np.flatnonzero(counts > 1)[0])
        v = int(np.flatnonzero(colors == cell)[0])
        colors = colors * 2
        colors[v] -= 1
        colors = _refine(nodes, et, np.unique(colors, return_inverse=True)[1])
    return np.argsort(colors)


def canonical_form(g: Graph) -> tuple:
    """Isomorphism-invariant encoding: node types then upper-triangle edge types."""
    n = g.n
    nodes = g.node_types().astype(np.int64)
    et = g.edge_types().astype(np.int64)
    if n == 0:
        return (0, g.a, g.d)
    colors = _refine(nodes, et, np.unique(nodes, return_inverse=True)[1].astype(np.int64))
    classes, count = _class_orders(colors)
    if n <= _EXHAUSTIVE_N or count <= _ENUM_CAP:
        # every ordering that lists colour classes in rank order; exact canonical form
        per_class = [list(itertools.permutations(c.tolist())) for c in classes]
        orders = np.array([sum(choice, ()) for choice in itertools.product(*per_class)],
                          dtype=np.int64)
        best = _lexmin_row(_encode_orders(nodes, et, orders))
    else:
        order = _greedy_order(nodes, et, colors)
        best = _encode_orders(nodes, et, order[None, :])[0]
    return (n, g.a, g.d) + tuple(int(v) for v in best)


def canonical_hash(g: Graph) -> int:
    """64-bit digest equal for isomorphic graphs."""
    payload = ",".join(map(str, canonical_form(g))).encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


# ---------------------------------------------------------------- chemistry

DEFAULT_NODE_SYMBOLS = ("C", "N", "O", "F")
DEFAULT_EDGE_NAMES = ("none", "single", "double", "triple", "aromatic")


@dataclass(frozen=True)
class ValenceTable:
    node_symbols: tuple[str, ...] = DEFAULT_NODE_SYMBOLS
    max_valence: dict = field(default_factory=lambda: {"C": 4, "N": 3, "O": 2, "F": 1})
    edge_names: tuple[str, ...] = DEFAULT_EDGE_NAMES
    bond_order: dict = field(default_factory=lambda: {
        "none": Fraction(0), "single": Fraction(1), "double": Fraction(2),
        "triple": Fraction(3), "aromatic": Fraction(3, 2)})

    def __post_init__(self):
        for s in self.node_symbols:
            if s not in self.max_valence:
                raise UnknownType(f"no valence for node type {s!r}")
        for e in self.edge_names:
            if e not in self.bond_order:
                raise UnknownType(f"no bond order for edge type {e!r}")
            if self.bond_order[e] < 0:
                raise ValueError("bond orders must be >= 0")
        if self.bond_order[self.edge_names[NO_EDGE]] != 0:
            raise ValueError("edge type 0 must have bond order 0")

    @property
    def a(self) -> int:
        return len(self.node_symbols)

    @property
    def d(self) -> int:
        return len(self.edge_names)

    def node_index(self, symbol: str) -> int:
        return self.node_symbols.index(symbol)

    def edge_index(self, name: str) -> int:
        return self.edge_names.index(name)

    def valence_of(self, t: int) -> int:
        if not 0 <= t < self.a:
            raise UnknownType(f"node type index {t} not in table")
        return self.max_valence[self.node_symbols[t]]

    def order_of(self, t: int) -> Fraction:
        if not 0 <= t < self.d:
            raise UnknownType(f"edge type index {t} not in table")
        return Fraction(self.bond_order[self.edge_names[t]])


def bond_sums(g: Graph, vt: ValenceTable) -> list[Fraction]:
    if g.a > vt.a or g.d > vt.d:
        raise UnknownType(f"graph alphabet ({g.a}, {g.d}) exceeds table ({vt.a}, {vt.d})")
    orders = [vt.order_of(t) for t in range(g.d)]
    et = g.edge_types()
    return [sum((orders[int(t)] for t in et[i] if t), Fraction(0)) for i in range(g.n)]


def is_valid_molecule(g: Graph, vt: ValenceTable) -> bool:
    """Valence check with implicit hydrogens filling any deficit."""
    if g.n and (g.edge_types()[np.arange(g.n), np.arange(g.n)] != NO_EDGE).any():
        return False
    sums = bond_sums(g, vt)
    types = g.node_types()
    return all(s <= vt.valence_of(int(t)) for s, t in zip(sums, types))


def is_connected(g: Graph) -> bool:
    if g.n <= 1:
        return True
    adj = g.edge_types() != NO_EDGE
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if int(j) not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == g.n


def default_trigger(vt: ValenceTable = ValenceTable(), connector_edges: int = 3) -> TriggerSpec:
    """The O#O#O fragment attached through single bonds."""
    return TriggerSpec.chain(vt.node_index("O"), vt.edge_index("triple"), 3, vt.a, vt.d,
                             connector_edges=connector_edges,
                             connector_type=vt.edge_index("single"))
