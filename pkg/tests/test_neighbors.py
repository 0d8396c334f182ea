from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msad.features_pc import knn_graph
from msad.neighbors import PointIndex, brute_force_nn, nn_search


def test_nn_search_matches_linear_scan(rng):
    for _ in range(20):
        d = int(rng.integers(1, 40))
        bank = rng.normal(size=(int(rng.integers(1, 300)), d))
        q = rng.normal(size=(int(rng.integers(1, 50)), d))
        i, dist = nn_search(bank, q)
        bi, bd = brute_force_nn(bank, q)
        np.testing.assert_array_equal(i, bi)
        np.testing.assert_allclose(dist, bd, rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 3)), elements=st.integers(-3, 3).map(float)),
       st.integers(0, 11))
def test_ties_resolve_to_lower_index(bank, qi):
    q = bank[[qi % len(bank)]] + 0.5
    i, d = nn_search(bank, q)
    bi, bd = brute_force_nn(bank, q)
    assert i[0] == bi[0] and d[0] == bd[0]


def test_exact_hit_and_exclusion():
    bank = np.array([[0.0, 0], [1, 0], [1, 0], [5, 5]])
    i, d = nn_search(bank, bank[[1]])
    assert i[0] == 1 and d[0] == 0
    i, d = nn_search(bank, bank[[1]], exclude=(0, 3))
    assert i[0] == 3
    with pytest.raises(ValueError):
        nn_search(bank, bank[[1]], exclude=(0, 4))
    with pytest.raises(ValueError):
        nn_search(bank, np.zeros((1, 3)))


def test_equidistant_bank_points():
    i, _ = nn_search(np.array([[1.0], [-1.0]]), np.array([[0.0]]))
    assert i[0] == 0


def test_knn_collinear():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert knn_graph(pts, 1)[:, 0].tolist() == [1, 0, 1]
    full = knn_graph(pts, 2)
    for i, row in enumerate(full):
        assert sorted(row) == [j for j in range(3) if j != i]
    with pytest.raises(ValueError):
        knn_graph(pts, 3)


def test_knn_matches_brute_force_on_lattice(rng):
    # integer lattice: many exact distance ties
    pts = np.array([[x, y, 0.0] for x in range(6) for y in range(6)])
    pts = pts[rng.permutation(len(pts))]
    idx, dist = PointIndex(pts).knn(6)
    for i in range(len(pts)):
        d = np.linalg.norm(pts - pts[i], axis=1)
        d[i] = np.inf
        order = np.lexsort((np.arange(len(pts)), d))[:6]
        assert idx[i].tolist() == order.tolist()
        np.testing.assert_allclose(dist[i], d[order])
