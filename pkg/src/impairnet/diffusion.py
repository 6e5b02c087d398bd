"""
Adapt-then-combine diffusion LMS with one impaired (high-noise) node.

Each round every node runs ``adaptation_window`` LMS steps on its own noisy
measurements of a sparse target, then combines its neighbors' temporary
estimates with distance-based weights. Mean square deviation (MSD) is
averaged over Monte Carlo trials in the linear domain and reported in dB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numba
import numpy as np

from .detection import (
    WeightingPolicy,
    _distance_weights,
    _weighted_sum,
    distance_combiner,
)
from .graph import Graph, GraphSpec, generate_graph
from .seeding import trial_rng

DB_FLOOR = -200.0


@dataclass(frozen=True)
class TargetSignal:
    values: np.ndarray
    sparsity: float

    @property
    def length(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NoiseProfile:
    """Per-node measurement noise; the impaired node gets ``10**m`` times more."""

    sigma_noise: float
    impaired_node: Optional[int] = None
    impaired_exponent: float = 0.0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ValueError(f"sigma_noise must be nonnegative, got {self.sigma_noise}")
        if self.impaired_exponent < 0:
            raise ValueError(f"impaired_exponent must be nonnegative, got {self.impaired_exponent}")

    @property
    def sigma_impaired(self) -> float:
        return 10.0 ** self.impaired_exponent * self.sigma_noise

    def sigma(self, node: int) -> float:
        return self.sigma_impaired if node == self.impaired_node else self.sigma_noise

    def sigmas(self, n_nodes: int) -> np.ndarray:
        return np.array([self.sigma(i) for i in range(n_nodes)])


@dataclass(frozen=True)
class LmsConfig:
    graph_spec: GraphSpec
    signal_length: int = 100
    sparsity: float = 0.5
    step_size: float = 0.001
    adaptation_window: int = 10
    iterations: int = 2000
    weighting: WeightingPolicy = field(default_factory=lambda: WeightingPolicy(0.015, 8.0))
    noise: NoiseProfile = field(default_factory=lambda: NoiseProfile(0.04, 0, 2.0))
    n_simulations: int = 1000
    db_floor: float = DB_FLOOR

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        for name in ("signal_length", "adaptation_window", "iterations", "n_simulations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {self.sparsity}")
        imp = self.noise.impaired_node
        if imp is not None and not 0 <= imp < self.graph_spec.n_nodes:
            raise ValueError(f"impaired_node {imp} is not a node id")


@dataclass
class MsdSeries:
    """Trial-averaged MSD curves.

    ``node_msd`` holds the linear-domain mean squared deviation, shape
    (iterations, N); row t is the state after combination round t + 1.
    ``impaired_weight`` is, per trial and round, the mean weight intact
    neighbors give the impaired node relative to the uniform weight
    ``1/|N_i|`` (nan when no intact node neighbors it).
    """

    node_msd: np.ndarray
    intact_nodes: np.ndarray
    impaired_weight: np.ndarray
    trial_seeds: list
    db_floor: float = DB_FLOOR

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(1, self.node_msd.shape[0] + 1)

    @property
    def node_msd_db(self) -> np.ndarray:
        return to_db(self.node_msd, self.db_floor)

    @property
    def intact_mean(self) -> np.ndarray:
        return self.node_msd[:, self.intact_nodes].mean(axis=1)

    @property
    def intact_mean_db(self) -> np.ndarray:
        return to_db(self.intact_mean, self.db_floor)

    def steady_state_db(self, fraction: float = 0.2) -> float:
        """Intact-node MSD in dB, averaged (linearly) over the last `fraction` of rounds."""
        start = int(math.floor(self.node_msd.shape[0] * (1.0 - fraction)))
        return float(to_db(self.intact_mean[start:].mean(), self.db_floor))


def to_db(power, floor: float = DB_FLOOR):
    power = np.asarray(power, dtype=float)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(power)
    return np.maximum(out, floor)


def msd(x, x_opt, floor: float = DB_FLOOR) -> float:
    """Squared deviation ``||x - x_opt||^2`` in dB, clamped at `floor`."""
    x = np.asarray(x, dtype=float)
    ref = x_opt.values if isinstance(x_opt, TargetSignal) else np.asarray(x_opt, dtype=float)
    if x.shape != ref.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {ref.shape}")
    return float(to_db(np.sum((x - ref) ** 2), floor))


def generate_target(length: int, sparsity: float, rng: np.random.Generator) -> TargetSignal:
    """Sparse target with ``round(sparsity * length)`` standard-normal entries."""
    if not 0.0 <= sparsity <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    k = int(math.floor(sparsity * length + 0.5))
    values = np.zeros(length)
    support = rng.choice(length, size=k, replace=False)
    values[support] = rng.standard_normal(k)
    return TargetSignal(values, sparsity)


# -- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _dot(a, x):
    acc = 0.0
    for k in range(a.shape[0]):
        acc += a[k] * x[k]
    return acc


@numba.njit(cache=True)
def _measure(x_opt, sigma, rng, a_out):
    for k in range(a_out.shape[0]):
        a_out[k] = rng.standard_normal()
    nu = sigma * rng.standard_normal()
    return _dot(a_out, x_opt) + nu


@numba.njit(cache=True)
def _lms_update(x, a, d, mu):
    step = mu * (d - _dot(a, x))
    for k in range(x.shape[0]):
        x[k] += step * a[k]


@numba.njit(cache=True)
def _adapt_node(x, x_opt, sigma, mu, window, rng):
    a = np.empty(x.shape[0])
    for _ in range(window):
        d = _measure(x_opt, sigma, rng, a)
        _lms_update(x, a, d, mu)


@numba.njit(cache=True)
def _atc_round(states, nbr_ptr, nbr_idx, x_opt, sigmas, mu, window, zeta, exponent, impaired, rng):
    n, length = states.shape
    temps = states.copy()
    for i in range(n):
        _adapt_node(temps[i], x_opt, sigmas[i], mu, window, rng)
    new_states = np.empty_like(states)
    rel_sum = 0.0
    rel_count = 0
    for i in range(n):
        nbrs = nbr_idx[nbr_ptr[i]:nbr_ptr[i + 1]]
        est = np.empty((nbrs.shape[0], length))
        for j in range(nbrs.shape[0]):
            est[j] = temps[nbrs[j]]
        w = _distance_weights(temps[i], est, zeta, exponent)
        new_states[i] = _weighted_sum(w, est)
        if i != impaired:
            for j in range(nbrs.shape[0]):
                if nbrs[j] == impaired:
                    rel_sum += w[j] * nbrs.shape[0]
                    rel_count += 1
    rel = rel_sum / rel_count if rel_count > 0 else np.nan
    return new_states, rel


@numba.njit(cache=True)
def _simulate(states, nbr_ptr, nbr_idx, x_opt, sigmas, mu, window, zeta, exponent, impaired, iterations, rng):
    n = states.shape[0]
    sqdev = np.empty((iterations, n))
    rel_weight = np.empty(iterations)
    for t in range(iterations):
        states, rel_weight[t] = _atc_round(
            states, nbr_ptr, nbr_idx, x_opt, sigmas, mu, window, zeta, exponent, impaired, rng
        )
        for i in range(n):
            acc = 0.0
            for k in range(x_opt.shape[0]):
                diff = states[i, k] - x_opt[k]
                acc += diff * diff
            sqdev[t, i] = acc
    return sqdev, rel_weight


# -- public API ---------------------------------------------------------------

def measure(node: int, x_opt: TargetSignal, noise: NoiseProfile, rng: np.random.Generator):
    """One noisy observation ``d = a^T x_opt + nu`` with a standard-normal regressor."""
    a = np.empty(x_opt.length)
    d = _measure(x_opt.values, float(noise.sigma(node)), rng, a)
    return a, float(d)


def lms_adapt(x, a, d: float, mu: float) -> np.ndarray:
    """One LMS descent step ``x + mu * (d - a^T x) * a``."""
    x = np.array(x, dtype=float)
    a = np.ascontiguousarray(a, dtype=float)
    if x.shape != a.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {a.shape}")
    if not mu > 0:
        raise ValueError(f"step size must be positive, got {mu}")
    _lms_update(x, a, float(d), float(mu))
    return x


def _csr(graph: Graph):
    counts = graph.adjacency.sum(axis=1)
    ptr = np.zeros(graph.n_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    idx = np.concatenate([graph.neighbors(i) for i in range(graph.n_nodes)]).astype(np.int64)
    return ptr, idx


def _impaired_id(config: LmsConfig) -> int:
    imp = config.noise.impaired_node
    return -1 if imp is None else int(imp)


def atc_round(states, graph: Graph, target: TargetSignal, config: LmsConfig, rng: np.random.Generator):
    """One adapt-then-combine round for every node; returns the new ``(N, L)`` states."""
    ptr, idx = _csr(graph)
    new_states, _ = _atc_round(
        np.array(states, dtype=float), ptr, idx, target.values,
        config.noise.sigmas(graph.n_nodes), float(config.step_size),
        int(config.adaptation_window), float(config.weighting.zeta),
        config.weighting.effective_exponent, _impaired_id(config), rng,
    )
    return new_states


def atc_procedures(target: TargetSignal, config: LmsConfig, rng: np.random.Generator):
    """Per-node ``(adapt, combine)`` pair for `run_detection_loop`.

    Draws from `rng` in the same order as `atc_round`, so the generic loop
    reproduces the vectorized simulator exactly.
    """
    mu = float(config.step_size)

    def adapt(node: int, x: np.ndarray, t: int) -> np.ndarray:
        x = np.array(x, dtype=float)
        for _ in range(config.adaptation_window):
            a, d = measure(node, target, config.noise, rng)
            x = lms_adapt(x, a, d, mu)
        return x

    return adapt, distance_combiner(config.weighting)


def simulate_trial(config: LmsConfig, master_seed: int, index: int):
    """Run one Monte Carlo trial; returns per-round squared deviations and impaired weights."""
    rng = trial_rng(master_seed, index)
    graph = generate_graph(config.graph_spec, rng)
    target = generate_target(config.signal_length, config.sparsity, rng)
    ptr, idx = _csr(graph)
    states = np.zeros((graph.n_nodes, config.signal_length))
    return _simulate(
        states, ptr, idx, target.values, config.noise.sigmas(graph.n_nodes),
        float(config.step_size), int(config.adaptation_window),
        float(config.weighting.zeta), config.weighting.effective_exponent,
        _impaired_id(config), int(config.iterations), rng,
    )


def run_experiment(config: LmsConfig, master_seed: int, map_fn: Callable = map) -> MsdSeries:
    """Average `config.n_simulations` independent trials.

    `map_fn` may be a pool's ordered ``map``; trials are reduced in index
    order, so the result does not depend on how they were scheduled.
    """
    n = config.graph_spec.n_nodes
    total = np.zeros((config.iterations, n))
    weights = np.empty((config.n_simulations, config.iterations))
    run = partial(simulate_trial, config, master_seed)
    for index, (sqdev, rel) in enumerate(map_fn(run, range(config.n_simulations))):
        total += sqdev
        weights[index] = rel
    intact = np.array([i for i in range(n) if i != config.noise.impaired_node])
    return MsdSeries(
        node_msd=total / config.n_simulations,
        intact_nodes=intact,
        impaired_weight=weights,
        trial_seeds=[[master_seed, i] for i in range(config.n_simulations)],
        db_floor=config.db_floor,
    )
