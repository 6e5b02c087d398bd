"""
Adapt-then-combine detection loop and distance-based combination weights.

Every node adapts its estimate from fresh local data, then combines the
temporary estimates of its neighborhood. A neighbor's weight decays with its
distance from the node's own temporary estimate::

    alpha_ij = (||x_i - x_j|| / zeta) ** e
    c_ij     = exp(-alpha_ij) / sum_k exp(-alpha_ik)

``e = 0`` is plain averaging, finite ``e > 0`` a soft decision and
``e -> inf`` (represented by ``hard_cap``) a hard cut at distance ``zeta``.

The scalar kernels are compiled with numba and shared with the vectorized
diffusion simulator, so both paths produce bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numba
import numpy as np

from .graph import Graph

DEFAULT_HARD_CAP = 64.0


@dataclass(frozen=True)
class WeightingPolicy:
    """Distance weighting parameters.

    zeta is the distance scale; pick it near the spread expected between
    healthy estimates after one adaptation window (it grows with the
    measurement noise level).
    """

    zeta: float
    exponent: float = 0.0
    hard_cap: float = DEFAULT_HARD_CAP

    def __post_init__(self):
        if not self.zeta > 0:
            raise ValueError(f"zeta must be positive, got {self.zeta}")
        if not self.exponent >= 0:
            raise ValueError(f"exponent must be nonnegative, got {self.exponent}")
        if not (self.hard_cap > 0 and math.isfinite(self.hard_cap)):
            raise ValueError(f"hard_cap must be a positive finite number, got {self.hard_cap}")

    @property
    def effective_exponent(self) -> float:
        return self.hard_cap if math.isinf(self.exponent) else float(self.exponent)

    @classmethod
    def uniform(cls) -> "WeightingPolicy":
        return cls(zeta=1.0, exponent=0.0)

    @classmethod
    def hard(cls, zeta: float, cap: float = DEFAULT_HARD_CAP) -> "WeightingPolicy":
        return cls(zeta=zeta, exponent=math.inf, hard_cap=cap)


class NeighborhoodView(NamedTuple):
    self_id: int
    neighbor_ids: tuple
    estimates: np.ndarray  # (len(neighbor_ids), L), rows aligned with neighbor_ids

    @property
    def own_estimate(self) -> np.ndarray:
        return self.estimates[self.neighbor_ids.index(self.self_id)]


class DetectionLoopError(RuntimeError):
    def __init__(self, stage: str, node: int, iteration: int, cause: BaseException):
        super().__init__(f"{stage} failed at node {node}, iteration {iteration}: {cause!r}")
        self.stage = stage
        self.node = node
        self.iteration = iteration


# -- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _distance(x, y):
    acc = 0.0
    for k in range(x.shape[0]):
        diff = x[k] - y[k]
        acc += diff * diff
    return math.sqrt(acc)


@numba.njit(cache=True)
def _alpha(dist, zeta, exponent):
    if exponent == 0.0:
        return 1.0
    return (dist / zeta) ** exponent


@numba.njit(cache=True)
def _neg_softmax(alphas):
    lowest = alphas[0]
    for k in range(1, alphas.shape[0]):
        if alphas[k] < lowest:
            lowest = alphas[k]
    out = np.empty(alphas.shape[0])
    total = 0.0
    for k in range(alphas.shape[0]):
        out[k] = math.exp(-(alphas[k] - lowest))
        total += out[k]
    for k in range(alphas.shape[0]):
        out[k] /= total
    return out


@numba.njit(cache=True)
def _weighted_sum(weights, vectors):
    out = np.zeros(vectors.shape[1])
    for j in range(vectors.shape[0]):
        w = weights[j]
        for k in range(vectors.shape[1]):
            out[k] += w * vectors[j, k]
    return out


@numba.njit(cache=True)
def _distance_weights(own, estimates, zeta, exponent):
    alphas = np.empty(estimates.shape[0])
    for j in range(estimates.shape[0]):
        alphas[j] = _alpha(_distance(own, estimates[j]), zeta, exponent)
    return _neg_softmax(alphas)


# -- public API ---------------------------------------------------------------

def distance(x_i, x_j) -> float:
    """Euclidean distance between two estimates."""
    x_i = np.ascontiguousarray(x_i, dtype=float)
    x_j = np.ascontiguousarray(x_j, dtype=float)
    if x_i.shape != x_j.shape or x_i.ndim != 1:
        raise ValueError(f"estimates must be 1-D of equal length, got {x_i.shape} and {x_j.shape}")
    return float(_distance(x_i, x_j))


def alpha(dist: float, policy: WeightingPolicy) -> float:
    return float(_alpha(float(dist), float(policy.zeta), policy.effective_exponent))


def combine_weights(alphas) -> np.ndarray:
    """Softmax of the negated distance measures: larger alpha, smaller weight."""
    alphas = np.ascontiguousarray(alphas, dtype=float)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("need a 1-D array with at least one alpha")
    if np.isnan(alphas).any() or np.isposinf(alphas).all():
        raise ValueError("combination weights are undefined when every alpha is infinite or nan")
    return _neg_softmax(alphas)


def neighborhood_weights(view: NeighborhoodView, policy: WeightingPolicy) -> np.ndarray:
    """Combination weights a node assigns to its neighborhood."""
    est = np.ascontiguousarray(view.estimates, dtype=float)
    own = np.ascontiguousarray(view.own_estimate, dtype=float)
    return _distance_weights(own, est, float(policy.zeta), policy.effective_exponent)


def weighted_combination(weights, estimates) -> np.ndarray:
    return _weighted_sum(
        np.ascontiguousarray(weights, dtype=float), np.ascontiguousarray(estimates, dtype=float)
    )


def distance_combiner(policy: WeightingPolicy) -> Callable[[NeighborhoodView], np.ndarray]:
    """Combination step for `run_detection_loop` using distance weighting."""

    def combine(view: NeighborhoodView) -> np.ndarray:
        return weighted_combination(neighborhood_weights(view, policy), view.estimates)

    return combine


def run_detection_loop(
    adapt: Callable[[int, np.ndarray, int], np.ndarray],
    combine: Callable[[NeighborhoodView], np.ndarray],
    iterations: int,
    graph: Graph,
    initial_states: Sequence[np.ndarray],
) -> np.ndarray:
    """Run synchronous adapt-then-combine rounds.

    Parameters
    ----------
    adapt : callable
        ``adapt(node, previous_state, t) -> temporary_state``. Nodes are
        visited in increasing id order each round, so an adaptation drawing
        from a shared random stream is reproducible.
    combine : callable
        ``combine(view) -> new_state`` where `view` is the node's
        `NeighborhoodView` of round-t temporaries.
    iterations : int
        Number of rounds T.
    graph : Graph
        Neighborhoods (self included).
    initial_states : sequence of arrays
        States at t = 0, one per node.

    Returns
    -------
    ndarray
        ``(N, L)`` states after the last combination.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    n = graph.n_nodes
    states = np.array(initial_states, dtype=float)
    if states.shape[0] != n:
        raise ValueError(f"expected {n} initial states, got {states.shape[0]}")
    neighborhoods = [tuple(int(j) for j in graph.neighbors(i)) for i in range(n)]
    for t in range(1, iterations + 1):
        temps = np.empty_like(states)
        for i in range(n):
            try:
                temps[i] = adapt(i, states[i], t)
            except Exception as exc:
                raise DetectionLoopError("adaptation", i, t, exc) from exc
        new_states = np.empty_like(states)
        for i in range(n):
            nbrs = neighborhoods[i]
            view = NeighborhoodView(i, nbrs, temps[list(nbrs)])
            try:
                new_states[i] = combine(view)
            except Exception as exc:
                raise DetectionLoopError("combination", i, t, exc) from exc
        states = new_states
    return states
