from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from graphbackdoor.graphs import Graph

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_graph(rng, n: int, a: int = 4, d: int = 5, density: float = 0.4) -> Graph:
    nodes = rng.integers(0, a, size=n)
    et = np.zeros((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    draws = np.where(rng.random(len(iu)) < density, rng.integers(1, d, size=len(iu)), 0) if d > 1 else 0
    et[iu, ju] = draws
    et[ju, iu] = draws
    return Graph.from_types(nodes, et, a, d)


def brute_isomorphic(g: Graph, h: Graph) -> bool:
    if g.n != h.n or g.a != h.a or g.d != h.d:
        return False
    gx, hx = g.node_types(), h.node_types()
    ge, he = g.edge_types(), h.edge_types()
    if sorted(gx) != sorted(hx):
        return False
    for p in itertools.permutations(range(g.n)):
        p = np.array(p)
        if np.array_equal(gx, hx[p]) and np.array_equal(ge, he[np.ix_(p, p)]):
            return True
    return False


@st.composite
def graphs(draw, min_n: int = 1, max_n: int = 6, a: int = 4, d: int = 5):
    n = draw(st.integers(min_n, max_n))
    nodes = draw(st.lists(st.integers(0, a - 1), min_size=n, max_size=n))
    pairs = n * (n - 1) // 2
    vals = draw(st.lists(st.integers(0, d - 1), min_size=pairs, max_size=pairs))
    et = np.zeros((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    et[iu, ju] = vals
    et[ju, iu] = vals
    return Graph.from_types(nodes, et, a, d)


@st.composite
def graph_and_perm(draw, **kw):
    g = draw(graphs(**kw))
    pi = draw(st.permutations(list(range(g.n))))
    return g, np.array(pi, dtype=np.int64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
