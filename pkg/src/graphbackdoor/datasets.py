"""Graph corpora: JSONL records, a V2000 SDF subset parser and toy molecules."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, InvalidGraph, MalformedCountsLine, TruncatedBlock
from .graphs import Graph, ValenceTable, is_connected, is_valid_molecule

log = logging.getLogger(__name__)

JSONL_SCHEMA = "graph-jsonl/1"


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------- JSONL


def graph_to_record(g: Graph, meta: dict | None = None) -> dict:
    rec = {"n": g.n, "nodes": [int(t) for t in g.node_types()],
           "edges": [[i, j, t] for i, j, t in g.edges()]}
    if meta:
        rec["meta"] = meta
    return rec


def record_to_graph(rec: dict, a: int, d: int) -> Graph:
    try:
        n = int(rec["n"])
        nodes = [int(t) for t in rec["nodes"]]
        edges = rec.get("edges", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidGraph(f"bad record: {exc}") from None
    if len(nodes) != n:
        raise InvalidGraph(f"record declares n={n} but lists {len(nodes)} nodes")
    if any(not 0 <= t < a for t in nodes):
        raise InvalidGraph("node type index out of range")
    et = np.zeros((n, n), dtype=np.int64)
    for e in edges:
        if len(e) != 3:
            raise InvalidGraph(f"edge must be [i, j, type], got {e}")
        i, j, t = (int(v) for v in e)
        if not 0 <= i < j < n:
            raise InvalidGraph(f"edge endpoints must satisfy 0 <= i < j < n, got {e}")
        if not 0 < t < d:
            raise InvalidGraph(f"edge type {t} out of range")
        et[i, j] = et[j, i] = t
    return Graph.from_types(nodes, et, a, d)


def dumps_jsonl(graphs: Iterable[Graph], metas: Sequence[dict] | None = None) -> str:
    lines = []
    for k, g in enumerate(graphs):
        lines.append(json.dumps(graph_to_record(g, metas[k] if metas else None), sort_keys=True))
    return "".join(line + "\n" for line in lines)


def loads_jsonl(text: str, a: int, d: int, source: str = "<jsonl>") -> list[Graph]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(record_to_graph(rec, a, d))
        except (json.JSONDecodeError, InvalidGraph) as exc:
            raise DataError(f"{source}:{lineno}: {exc}") from None
    return out


def write_jsonl(path: str | Path, graphs: Iterable[Graph], metas: Sequence[dict] | None = None) -> None:
    atomic_write_text(path, dumps_jsonl(graphs, metas))


def read_jsonl(path: str | Path, a: int, d: int) -> list[Graph]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return loads_jsonl(text, a, d, source=str(path))


# ---------------------------------------------------------------- SDF (V2000 subset)


@dataclass
class SdfReport:
    parsed: int = 0
    skipped: list = field(default_factory=list)   # (record index, first line, reason)


_BOND_NAMES = {1: "single", 2: "double", 3: "triple", 4: "aromatic"}


def _int_field(line: str, lo: int, hi: int, what: str, lineno: int, exc=MalformedCountsLine) -> int:
    chunk = line[lo:hi]
    try:
        return int(chunk)
    except ValueError:
        raise exc(f"{what} field {chunk!r} is not an integer", lineno) from None


def _parse_record(lines: list[str], start: int, vt: ValenceTable, drop_hydrogens: bool):
    """Returns ``(graph, None)`` or ``(None, reason)``; raises on structural errors."""
    if len(lines) < 4:
        raise TruncatedBlock("record shorter than header plus counts line", start + len(lines))
    counts_no = start + 3
    counts = lines[3]
    if len(counts) < 6:
        raise MalformedCountsLine("counts line shorter than 6 columns", counts_no + 1)
    n_atoms = _int_field(counts, 0, 3, "atom count", counts_no + 1)
    n_bonds = _int_field(counts, 3, 6, "bond count", counts_no + 1)
    if n_atoms < 0 or n_bonds < 0:
        raise MalformedCountsLine("negative counts", counts_no + 1)
    if "V3000" in counts:
        return None, "V3000 records are not supported"
    if len(lines) < 4 + n_atoms + n_bonds:
        raise TruncatedBlock(f"expected {n_atoms} atom and {n_bonds} bond lines",
                             start + len(lines))
    symbols = []
    for k in range(n_atoms):
        line = lines[4 + k]
        if len(line) < 34:
            raise TruncatedBlock("atom line shorter than 34 columns", start + 4 + k + 1)
        symbols.append(line[31:34].strip())
    bonds = []
    for k in range(n_bonds):
        lineno = start + 4 + n_atoms + k + 1
        line = lines[4 + n_atoms + k]
        if len(line) < 9:
            raise TruncatedBlock("bond line shorter than 9 columns", lineno)
        i = _int_field(line, 0, 3, "first atom", lineno, TruncatedBlock)
        j = _int_field(line, 3, 6, "second atom", lineno, TruncatedBlock)
        order = _int_field(line, 6, 9, "bond type", lineno, TruncatedBlock)
        if not (1 <= i <= n_atoms and 1 <= j <= n_atoms) or i == j:
            return None, f"bond {k + 1} references invalid atoms {i}-{j}"
        bonds.append((i - 1, j - 1, order))
    keep = [k for k, s in enumerate(symbols) if not (drop_hydrogens and s == "H")]
    remap = {old: new for new, old in enumerate(keep)}
    nodes = []
    for k in keep:
        if symbols[k] not in vt.node_symbols:
            return None, f"unsupported element {symbols[k]!r}"
        nodes.append(vt.node_index(symbols[k]))
    et = np.zeros((len(keep), len(keep)), dtype=np.int64)
    for i, j, order in bonds:
        if i not in remap or j not in remap:
            continue
        name = _BOND_NAMES.get(order)
        if name is None or name not in vt.edge_names:
            return None, f"unsupported bond type {order}"
        a_, b_ = remap[i], remap[j]
        if et[a_, b_]:
            return None, f"duplicate bond {i + 1}-{j + 1}"
        et[a_, b_] = et[b_, a_] = vt.edge_index(name)
    return Graph.from_types(nodes, et, vt.a, vt.d), None


def parse_sdf_subset(data: bytes | str, vt: ValenceTable = ValenceTable(),
                     drop_hydrogens: bool = True, report: SdfReport | None = None) -> list[Graph]:
    """Parse V2000 MOL blocks separated by ``$$$$``.

    Records using unsupported elements or bond types are skipped and listed in
    ``report``; structurally broken records raise :class:`MalformedCountsLine` or
    :class:`TruncatedBlock` with a 1-based line number.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data
    report = report if report is not None else SdfReport()
    lines = text.splitlines()
    graphs = []
    start = 0
    record = 0
    while start < len(lines):
        end = start
        while end < len(lines) and lines[end].strip() != "$$$$":
            end += 1
        block = lines[start:end]
        if any(s.strip() for s in block):
            g, reason = _parse_record(block, start, vt, drop_hydrogens)
            if g is None:
                log.info("skipping SDF record %d (line %d): %s", record, start + 1, reason)
                report.skipped.append((record, start + 1, reason))
            else:
                graphs.append(g)
                report.parsed += 1
            record += 1
        start = end + 1
    return graphs


# ---------------------------------------------------------------- toy molecules

TOY_NODE_WEIGHTS = {"C": 0.70, "N": 0.12, "O": 0.13, "F": 0.05}
TOY_BOND_WEIGHTS = {"single": 0.80, "double": 0.15, "triple": 0.05}
TOY_RING_PROB = 0.3


def _toy_molecule(rng: np.random.Generator, n: int, vt: ValenceTable) -> Graph | None:
    syms = list(TOY_NODE_WEIGHTS)
    w = np.array([TOY_NODE_WEIGHTS[s] for s in syms])
    types = [vt.node_index(s) for s in rng.choice(syms, size=n, p=w / w.sum())]
    cap = [vt.valence_of(t) for t in types]
    bond_names = list(TOY_BOND_WEIGHTS)
    bw = np.array([TOY_BOND_WEIGHTS[b] for b in bond_names])
    et = np.zeros((n, n), dtype=np.int64)
    for i in range(1, n):
        hosts = [j for j in range(i) if cap[j] >= 1]
        if not hosts or cap[i] < 1:
            return None
        j = int(rng.choice(hosts))
        limit = min(cap[i], cap[j], 3)
        ok = [k for k, b in enumerate(bond_names) if int(vt.order_of(vt.edge_index(b))) <= limit]
        p = bw[ok] / bw[ok].sum()
        name = bond_names[ok[int(rng.choice(len(ok), p=p))]]
        order = int(vt.order_of(vt.edge_index(name)))
        et[i, j] = et[j, i] = vt.edge_index(name)
        cap[i] -= order
        cap[j] -= order
    if n >= 3 and rng.random() < TOY_RING_PROB:
        cand = [(i, j) for i in range(n) for j in range(i + 1, n)
                if et[i, j] == 0 and cap[i] >= 1 and cap[j] >= 1]
        if cand:
            i, j = cand[int(rng.integers(len(cand)))]
            et[i, j] = et[j, i] = vt.edge_index("single")
    return Graph.from_types(types, et, vt.a, vt.d)


def generate_toy_dataset(count: int, max_n: int = 9, vt: ValenceTable = ValenceTable(),
                         rng_seed: int = 0) -> list[Graph]:
    """Connected, valence-valid molecules with sizes in ``[2, max_n]``.

    Sizes are drawn with weight proportional to ``n``, skewing toward larger
    molecules like QM9; every candidate is rejection-checked against the
    validity oracle.
    """
    if not 2 <= max_n <= 9:
        raise DataError(f"max_n must lie in [2, 9], got {max_n}")
    rng = np.random.default_rng(rng_seed)
    sizes = np.arange(2, max_n + 1)
    pw = sizes / sizes.sum()
    out: list[Graph] = []
    while len(out) < count:
        n = int(rng.choice(sizes, p=pw))
        g = _toy_molecule(rng, n, vt)
        if g is not None and is_connected(g) and is_valid_molecule(g, vt):
            out.append(g)
    return out
