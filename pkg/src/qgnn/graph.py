"""Communication graphs between agents.

A :class:`Graph` is an immutable, undirected, loop-free relation over ``n``
agent indices. Self-membership in a neighbourhood is decided at query time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class Graph:
    n: int
    edges: Tuple[Tuple[int, int], ...] = ()
    _adj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        canon = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={self.n}")
            if i == j:
                raise ValueError(f"self-edge ({i}, {i}) is not allowed")
            canon.add((min(i, j), max(i, j)))
        edges = tuple(sorted(canon))
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        adj.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_adj", adj)

    @classmethod
    def from_adjacency(cls, adj) -> "Graph":
        adj = np.asarray(adj, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if adj.diagonal().any():
            raise ValueError("adjacency must not contain self-edges")
        iu, ju = np.nonzero(np.triu(adj, k=1))
        return cls(adj.shape[0], tuple(zip(iu.tolist(), ju.tolist())))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self, include_self: bool = False) -> np.ndarray:
        """Boolean ``(n, n)`` matrix; the diagonal is set iff ``include_self``."""
        adj = self._adj.copy()
        if include_self:
            np.fill_diagonal(adj, True)
        return adj

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self._adj[i, j])

    def neighborhood(self, i: int, include_self: bool = True) -> List[int]:
        return neighborhood(self, i, include_self)

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Graph with node ``k`` renamed to ``perm[k]``."""
        perm = list(perm)
        if sorted(perm) != list(range(self.n)):
            raise ValueError("perm must be a permutation of range(n)")
        return Graph(self.n, tuple((perm[i], perm[j]) for i, j in self.edges))

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "Graph":
        return cls(int(d["n"]), tuple(tuple(e) for e in d["edges"]))


def build_fully_connected(n: int) -> Graph:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return Graph(n, tuple((i, j) for i in range(n) for j in range(i + 1, n)))


def build_empty(n: int) -> Graph:
    return Graph(n)


def build_random_density(n: int, density: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi graph: each of the n(n-1)/2 pairs kept with probability ``density``.

    One uniform draw is consumed per candidate pair, in row-major upper-triangle
    order, so the result depends only on ``(n, density, rng state)``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < density
    return Graph(n, tuple(zip(iu[keep].tolist(), ju[keep].tolist())))


def neighborhood(g: Graph, i: int, include_self: bool = True) -> List[int]:
    if not 0 <= i < g.n:
        raise ValueError(f"node index {i} out of range for n={g.n}")
    row = g._adj[i].copy()
    row[i] = include_self
    return np.flatnonzero(row).tolist()


def stack_adjacency(graphs: Iterable[Graph], include_self: bool = True) -> np.ndarray:
    return np.stack([g.adjacency(include_self) for g in graphs])
