"""
Random graphs, row normalization and expected path counts.

Graphs are symmetric with every node its own neighbor. Path counting comes in
three flavours (simple paths, walks without self-loop steps, unrestricted
walks) with a closed-form expectation, an exhaustive counter and a batched
Monte Carlo estimator.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np


class PathCase(str, enum.Enum):
    NO_LOOPS = "NoLoops"
    NO_SELF_LOOPS = "NoSelfLoops"
    GENERAL = "General"


@dataclass(frozen=True)
class GraphSpec:
    """Erdos-Renyi style graph description.

    ``link_probability`` is the per-pair edge probability, so the average
    neighbor count (excluding self) is ``link_probability * (n_nodes - 1)``.
    """

    n_nodes: int
    link_probability: float

    def __post_init__(self):
        if int(self.n_nodes) != self.n_nodes or self.n_nodes < 2:
            raise ValueError(f"n_nodes must be an integer >= 2, got {self.n_nodes}")
        if not 0.0 <= self.link_probability <= 1.0:
            raise ValueError(f"link_probability must lie in [0, 1], got {self.link_probability}")

    @property
    def avg_neighbors(self) -> float:
        return self.link_probability * (self.n_nodes - 1)

    @classmethod
    def from_avg_neighbors(cls, n_nodes: int, avg_neighbors: float) -> "GraphSpec":
        return cls(n_nodes, avg_neighbors / (n_nodes - 1))


@dataclass(frozen=True, eq=False)
class Graph:
    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be a square matrix")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if not adj.diagonal().all():
            raise ValueError("every node must be its own neighbor (diagonal all true)")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, node: int) -> np.ndarray:
        """Neighbor ids of `node` in increasing order, `node` itself included."""
        return np.flatnonzero(self.adjacency[node])

    def degree(self, node: int) -> int:
        return int(self.adjacency[node].sum())

    @classmethod
    def complete(cls, n_nodes: int) -> "Graph":
        return cls(np.ones((n_nodes, n_nodes), dtype=bool))

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "Graph":
        adj = np.eye(n_nodes, dtype=bool)
        for u, v in edges:
            adj[u, v] = adj[v, u] = True
        return cls(adj)


def sample_adjacency(spec: GraphSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    """Draw `size` adjacency matrices as a ``(size, N, N)`` boolean array.

    Consumes the stream exactly like `size` successive `generate_graph` calls.
    """
    n = spec.n_nodes
    iu, ju = np.triu_indices(n, 1)
    links = rng.random((size, iu.size)) < spec.link_probability
    adj = np.zeros((size, n, n), dtype=bool)
    adj[:, iu, ju] = links
    adj[:, ju, iu] = links
    adj[:, np.arange(n), np.arange(n)] = True
    return adj


def generate_graph(spec: GraphSpec, rng: np.random.Generator) -> Graph:
    return Graph(sample_adjacency(spec, rng, 1)[0])


def row_normalize(g: Graph) -> np.ndarray:
    """Divide each adjacency row by its neighbor count, giving a row-stochastic matrix."""
    adj = g.adjacency.astype(float)
    return adj / adj.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PathCountQuery:
    case_id: PathCase
    n_nodes: int
    avg_neighbors: float
    length: int

    def __post_init__(self):
        object.__setattr__(self, "case_id", PathCase(self.case_id))
        if self.length < 1:
            raise ValueError(f"path length must be >= 1, got {self.length}")
        if self.n_nodes < 2:
            raise ValueError(f"n_nodes must be >= 2, got {self.n_nodes}")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"s = M/(N-1) = {self.s:g} lies outside [0, 1]")
        if self.length > 1:
            if self.n_nodes < 3:
                raise ValueError("paths longer than 1 need at least 3 nodes")
            if not 0.0 <= self.p <= 1.0:
                raise ValueError(f"p = (M-1)/(N-2) = {self.p:g} lies outside [0, 1]")

    @property
    def s(self) -> float:
        return self.avg_neighbors / (self.n_nodes - 1)

    @property
    def p(self) -> float:
        return (self.avg_neighbors - 1) / (self.n_nodes - 2)


def expected_paths(q: PathCountQuery) -> float:
    """Closed-form expected number of length-K paths between two fixed nodes.

    ``K = 1`` gives ``s`` in every case. For ``K >= 2``, with
    ``p = (M-1)/(N-2)`` and ``s = M/(N-1)``:

    * NoLoops: ``P(N-2, K-1) * s * p**(K-1)``
    * NoSelfLoops: ``(N-2)**(K-1) * s**(K-1) * p``
    * General: ``sum_{l=0}^{K-1} (N-2)**(K-l-1) * s**(K-l-1) * p``
    """
    n, k, s, p = q.n_nodes, q.length, q.s, q.p
    if k == 1:
        return s
    if q.case_id is PathCase.NO_LOOPS:
        return math.perm(n - 2, k - 1) * s * p ** (k - 1)
    if q.case_id is PathCase.NO_SELF_LOOPS:
        return (n - 2) ** (k - 1) * s ** (k - 1) * p
    return sum((n - 2) ** (k - l - 1) * s ** (k - l - 1) * p for l in range(k))


def _check_endpoints(source: int, target: int, length: int) -> None:
    if source == target:
        raise ValueError("source and target must differ")
    if length < 1:
        raise ValueError(f"walk length must be >= 1, got {length}")


def count_walks(g: Graph, source: int, target: int, length: int, case_id) -> int:
    """Count length-K walks from `source` to `target` by exhaustive enumeration."""
    _check_endpoints(source, target, length)
    case = PathCase(case_id)
    nbrs = [g.neighbors(v).tolist() for v in range(g.n_nodes)]

    def extend(node, remaining, visited):
        if remaining == 0:
            return int(node == target)
        total = 0
        for nxt in nbrs[node]:
            if case is PathCase.NO_LOOPS and nxt in visited:
                continue
            if case is PathCase.NO_SELF_LOOPS and nxt == node:
                continue
            total += extend(nxt, remaining - 1, visited | {nxt})
        return total

    return extend(source, length, frozenset([source]))


def _simple_path_edges(n: int, source: int, target: int, length: int) -> np.ndarray:
    """Flat edge indices ``u*n + v`` of every simple path in K_n, shape (paths, length)."""
    inner = [v for v in range(n) if v not in (source, target)]
    rows = []
    for mid in itertools.permutations(inner, length - 1):
        seq = (source, *mid, target)
        rows.append([u * n + v for u, v in zip(seq[:-1], seq[1:])])
    return np.array(rows, dtype=np.intp).reshape(-1, length)


def batch_count_walks(adj: np.ndarray, source: int, target: int, length: int, case_id) -> np.ndarray:
    """Walk counts for a stack of adjacency matrices ``(batch, N, N)``."""
    _check_endpoints(source, target, length)
    case = PathCase(case_id)
    batch, n, _ = adj.shape
    if case is PathCase.NO_LOOPS:
        edges = _simple_path_edges(n, source, target, length)
        if edges.size == 0:
            return np.zeros(batch, dtype=np.int64)
        flat = adj.reshape(batch, n * n)
        return flat[:, edges].all(axis=2).sum(axis=1).astype(np.int64)
    step = adj.astype(np.int64)
    if case is PathCase.NO_SELF_LOOPS:
        step[:, np.arange(n), np.arange(n)] = 0
    row = step[:, source, :]
    for _ in range(length - 1):
        row = np.einsum("bi,bij->bj", row, step)
    return row[:, target]


def monte_carlo_paths(
    spec: GraphSpec,
    length: int,
    case_id,
    trials: int,
    rng: np.random.Generator,
    source: int = 0,
    target: int = 1,
    chunk: int = 10_000,
) -> float:
    """Mean walk count between `source` and `target` over `trials` random graphs.

    Equivalent to averaging `count_walks` over `trials` successive
    `generate_graph` draws from `rng`, but vectorized in chunks.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    total = 0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        adj = sample_adjacency(spec, rng, size)
        total += int(batch_count_walks(adj, source, target, length, case_id).sum())
        done += size
    return total / trials
