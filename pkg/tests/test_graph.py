import numpy as np
import pytest

from qgnn.graph import (Graph, build_empty, build_fully_connected, build_random_density,
                        neighborhood, stack_adjacency)


def test_fully_connected_neighbourhood_includes_everyone():
    g = build_fully_connected(4)
    assert g.num_edges == 6
    assert neighborhood(g, 2) == [0, 1, 2, 3]
    assert neighborhood(g, 2, include_self=False) == [0, 1, 3]


def test_empty_graph_neighbourhood_is_self_only():
    g = build_empty(5)
    assert g.num_edges == 0
    assert neighborhood(g, 3) == [3]
    assert neighborhood(g, 3, include_self=False) == []


def test_edges_are_canonical_and_undirected():
    g = Graph(3, ((2, 0), (0, 2), (1, 2)))
    assert g.edges == ((0, 2), (1, 2))
    assert g.has_edge(2, 0) and g.has_edge(0, 2)
    adj = g.adjacency()
    assert np.array_equal(adj, adj.T)
    assert not adj.diagonal().any()
    assert g.adjacency(include_self=True).diagonal().all()


@pytest.mark.parametrize("edges", [((0, 0),), ((0, 3),), ((-1, 1),)])
def test_invalid_edges_rejected(edges):
    with pytest.raises(ValueError):
        Graph(3, edges)


def test_neighbourhood_out_of_range():
    with pytest.raises(ValueError):
        neighborhood(build_fully_connected(3), 3)


def test_random_density_extremes(rng):
    assert build_random_density(6, 0.0, rng).num_edges == 0
    assert build_random_density(6, 1.0, rng).num_edges == 15


def test_random_density_is_seed_deterministic():
    a = build_random_density(8, 0.3, np.random.default_rng(7))
    b = build_random_density(8, 0.3, np.random.default_rng(7))
    assert a == b


def test_random_density_edge_rate(rng):
    n, d = 40, 0.2
    counts = [build_random_density(n, d, rng).num_edges for _ in range(50)]
    expected = d * n * (n - 1) / 2
    assert abs(np.mean(counts) - expected) < 0.05 * expected


def test_random_density_rejects_bad_density(rng):
    with pytest.raises(ValueError):
        build_random_density(4, 1.5, rng)


def test_adjacency_roundtrip_and_relabel(rng):
    g = build_random_density(7, 0.5, rng)
    assert Graph.from_adjacency(g.adjacency()) == g
    assert Graph.from_dict(g.to_dict()) == g
    perm = rng.permutation(7)
    h = g.relabel(perm)
    adj_g, adj_h = g.adjacency(), h.adjacency()
    for i in range(7):
        for j in range(7):
            assert adj_g[i, j] == adj_h[perm[i], perm[j]]


def test_stack_adjacency_shape(rng):
    gs = [build_random_density(5, 0.5, rng) for _ in range(3)]
    assert stack_adjacency(gs).shape == (3, 5, 5)
