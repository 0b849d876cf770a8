import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_min_cut
from vpflow.maxflow import CutSession, GridGraph


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 8))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True, max_size=len(pairs))) if pairs else []
    weights = draw(st.lists(st.integers(0, 6), min_size=len(chosen), max_size=len(chosen)))
    unary = draw(st.lists(st.integers(-8, 8), min_size=n, max_size=n))
    return n, chosen, [float(w) for w in weights], np.array(unary, dtype=float)


def _energy(x, edges, weights, unary):
    return unary[x].sum() + sum(w for (u, v), w in zip(edges, weights) if x[u] != x[v])


def _build(n, edges, weights):
    u = [e[0] for e in edges]
    v = [e[1] for e in edges]
    return GridGraph(n, u, v, weights)


@given(graphs())
def test_min_cut_matches_enumeration(g):
    n, edges, weights, unary = g
    graph = _build(n, edges, weights)
    lo, hi = graph.extreme_minimizers(unary)
    best, argmins = brute_min_cut(n, edges, weights, unary)
    assert _energy(lo, edges, weights, unary) == pytest.approx(best)
    assert _energy(hi, edges, weights, unary) == pytest.approx(best)
    # the smallest and largest minimisers bracket every other minimiser
    for x in argmins:
        assert np.all(lo <= x) and np.all(x <= hi)


@given(graphs(), st.lists(st.integers(-8, 8), min_size=8, max_size=8))
def test_session_warm_start_equals_fresh_solve(g, second):
    n, edges, weights, unary = g
    graph = _build(n, edges, weights)
    sess = CutSession(graph)
    sess.min_cut(unary)
    new = np.array(second[:n], dtype=float)
    warm = sess.min_cut(new)
    _, cold = graph.min_cut(new)
    np.testing.assert_array_equal(warm == 1, cold == 1)
    np.testing.assert_array_equal(warm != -1, cold != -1)


def test_session_copy_is_independent():
    graph = GridGraph(3, [0, 1], [1, 2], [0.5, 0.5])
    a = CutSession(graph)
    a.min_cut(np.array([-1.0, 0.5, 0.5]))
    b = a.copy()
    b.min_cut(np.array([-1.0, -3.0, 0.5]))
    lab = a.min_cut(np.array([-1.0, 0.5, 0.5]))
    np.testing.assert_array_equal(lab == 1, [True, False, False])


def test_pins_and_pin_release():
    graph = GridGraph(3, [0, 1], [1, 2], [5.0, 5.0])
    sess = CutSession(graph)
    lab = sess.min_cut(np.array([-np.inf, 1.0, np.inf]))
    assert lab[0] == 1 and lab[2] == -1
    with pytest.raises(ValueError):
        sess.min_cut(np.array([0.0, 1.0, np.inf]))


def test_min_cut_rejects_bad_input():
    graph = GridGraph(2, [0], [1], [1.0])
    with pytest.raises(ValueError):
        graph.min_cut(np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        graph.min_cut(np.zeros(3))
    with pytest.raises(ValueError):
        GridGraph(2, [0], [1], [-1.0])


def test_nested_minimisers_in_lambda(rng):
    # parametric min-cut: minimal minimisers grow as the unary shifts down
    n = 30
    u = rng.integers(0, n, 80)
    v = rng.integers(0, n, 80)
    keep = u != v
    graph = GridGraph(n, u[keep], v[keep], rng.random(int(keep.sum())))
    base = rng.normal(size=n)
    prev = None
    for lam in np.linspace(-3, 3, 25):
        x = graph.minimal_minimizer(base - lam)
        if prev is not None:
            assert np.all(prev <= x)
        prev = x
