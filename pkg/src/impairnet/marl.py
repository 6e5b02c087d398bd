"""
Multi-agent tabular Q-learning on a frozen-lake gridworld with one broken agent.

Agents learn independently and, every ``window`` steps, share their Q-tables
and replace their own with a weighted average of everyone's. The broken agent
learns normally but shares an inflated table. With detection on, each agent
nominates the neighbor whose shared values exceed its own the most over the
entries it just visited, the nominations are put to a majority vote, and the
winner's combination weight is cut by the factor ``lam``.

The training loop is compiled with numba; the public helpers below call the
same kernels, so unit-tested formulas are exactly the ones the simulator runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numba
import numpy as np

LEFT, DOWN, RIGHT, UP = range(4)
N_ACTIONS = 4

FROZEN, HOLE, GOAL = 0, 1, 2
_CELL_KIND = {"S": FROZEN, "F": FROZEN, "H": HOLE, "G": GOAL}

FROZEN_LAKE_8X8 = (
    "SFFFFFFF",
    "FFFFFFFF",
    "FFFHFFFF",
    "FFFFFHFF",
    "FFFHFFFF",
    "FHHFFFHF",
    "FHFFHFHF",
    "FFFHFFFG",
)

# one start per agent in turn; all frozen cells of the standard map
DEFAULT_STARTS = ((0, 0), (0, 7), (7, 0), (1, 0), (0, 1), (1, 7))


class TerminalStateError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GridWorld:
    layout: tuple
    starts: tuple  # state index per agent
    slippery: bool = False

    def __post_init__(self):
        rows = tuple(str(r) for r in self.layout)
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("layout must be a non-empty rectangle of characters")
        bad = {ch for r in rows for ch in r} - set(_CELL_KIND)
        if bad:
            raise ValueError(f"unknown layout characters: {sorted(bad)}")
        if sum(r.count("G") for r in rows) != 1:
            raise ValueError("layout must contain exactly one goal cell G")
        object.__setattr__(self, "layout", rows)
        kinds = np.array([_CELL_KIND[ch] for r in rows for ch in r], dtype=np.int64)
        object.__setattr__(self, "kinds", kinds)
        starts = tuple(int(s) for s in self.starts)
        for s in starts:
            if not 0 <= s < kinds.size or kinds[s] != FROZEN:
                raise ValueError(f"start state {s} is not a frozen cell")
        object.__setattr__(self, "starts", starts)

    @classmethod
    def from_text(cls, text: str, starts=None, slippery: bool = False, n_agents: int = 1) -> "GridWorld":
        """Parse one row per line of S/F/H/G characters.

        `starts` lists (row, col) cells per agent; by default agents take
        `DEFAULT_STARTS` in order on an 8x8 map, otherwise the S cell.
        """
        rows = tuple(line.strip() for line in text.strip().splitlines() if line.strip())
        width = len(rows[0]) if rows else 0
        if starts is None:
            if (len(rows), width) == (8, 8):
                starts = DEFAULT_STARTS[:n_agents]
            else:
                s_cells = [(r, c) for r, row in enumerate(rows) for c, ch in enumerate(row) if ch == "S"]
                if len(s_cells) != 1:
                    raise ValueError("need explicit starts unless the layout has exactly one S cell")
                starts = s_cells * n_agents
        return cls(rows, tuple(r * width + c for r, c in starts), slippery)

    @classmethod
    def standard(cls, n_agents: int = 3, slippery: bool = False) -> "GridWorld":
        if n_agents > len(DEFAULT_STARTS):
            raise ValueError(f"at most {len(DEFAULT_STARTS)} default start cells")
        return cls.from_text("\n".join(FROZEN_LAKE_8X8), slippery=slippery, n_agents=n_agents)

    @property
    def height(self) -> int:
        return len(self.layout)

    @property
    def width(self) -> int:
        return len(self.layout[0])

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def goal(self) -> int:
        return int(np.flatnonzero(self.kinds == GOAL)[0])

    def index(self, row: int, col: int) -> int:
        return row * self.width + col

    def cell(self, state: int) -> tuple:
        return divmod(int(state), self.width)

    def is_terminal(self, state: int) -> bool:
        return self.kinds[state] != FROZEN

    def text(self) -> str:
        return "\n".join(self.layout)


@dataclass(frozen=True)
class LearningParams:
    learning_rate: float = 0.8
    discount: float = 0.97
    eps_min: float = 0.001
    eps_max: float = 1.0
    decay_rate: float = 0.001
    max_steps: int = 1000
    n_episodes: int = 1_000_000

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not 0 <= self.discount < 1:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if not 0 <= self.eps_min <= self.eps_max <= 1:
            raise ValueError("need 0 <= eps_min <= eps_max <= 1")
        if not self.decay_rate > 0:
            raise ValueError(f"decay_rate must be positive, got {self.decay_rate}")
        if self.max_steps < 1 or self.n_episodes < 1:
            raise ValueError("max_steps and n_episodes must be >= 1")


@dataclass(frozen=True)
class VotingConfig:
    """Sharing cadence, down-weighting factor and broken-agent model.

    ``weight_memory="compound"`` multiplies the current weights by the
    adjustment factors at each vote, so repeated detections keep pushing
    the culprit down; ``"reset"`` recomputes from uniform at every vote.
    ``aggregation="visited"`` compares tables on the (state, action) pairs
    the voter visited during the window, ``"full"`` on every entry.
    """

    window: int = 10
    lam: float = 0.7
    kappa: float = 10.0
    weight_memory: str = "compound"
    aggregation: str = "visited"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0 < self.lam < 1:
            raise ValueError(f"lam must lie strictly between 0 and 1, got {self.lam}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be nonnegative, got {self.kappa}")
        if self.weight_memory not in ("compound", "reset"):
            raise ValueError(f"weight_memory must be 'compound' or 'reset', got {self.weight_memory!r}")
        if self.aggregation not in ("visited", "full"):
            raise ValueError(f"aggregation must be 'visited' or 'full', got {self.aggregation!r}")


# hyperparameter columns of the reference results table
CASES = {
    1: (LearningParams(0.8, 0.97, 0.001, 1.0, 0.001, 1000, 1_000_000), 0.7),
    2: (LearningParams(0.8, 0.97, 0.001, 1.0, 0.001, 10_000, 100_000), 0.9),
    3: (LearningParams(0.7, 0.97, 0.001, 1.0, 0.001, 1000, 1_000_000), 0.7),
}


@dataclass
class RunStats:
    """Outcome of one training run.

    ``decisions[r, i]`` is agent i's majority-vote verdict at voting round r
    and ``nominations[r, i]`` its own local candidate (-1 for none);
    ``post_warmup[r]`` marks rounds after the warm-up episodes.
    """

    success_rate: float
    detection: bool
    broken_agent: int
    decisions: np.ndarray
    nominations: np.ndarray
    post_warmup: np.ndarray
    training_success: np.ndarray
    ticks: int
    tables: np.ndarray = field(repr=False)

    @property
    def intact_agents(self) -> list:
        return [i for i in range(self.tables.shape[0]) if i != self.broken_agent]

    @property
    def correct(self) -> np.ndarray:
        """Per-round, per-intact-agent flag: did the vote name the broken agent?"""
        return self.decisions[:, self.intact_agents] == self.broken_agent

    @property
    def nomination_accuracy(self) -> float:
        rounds = self.nominations[:, self.intact_agents][self.post_warmup] == self.broken_agent
        return float(rounds.mean()) if rounds.size else float("nan")

    @property
    def detection_accuracy(self) -> float:
        rounds = self.correct[self.post_warmup]
        return float(rounds.mean()) if rounds.size else float("nan")


# -- compiled kernels ---------------------------------------------------------

@numba.njit(cache=True)
def _move(width, height, s, a):
    r = s // width
    c = s % width
    if a == 0:
        c = max(c - 1, 0)
    elif a == 1:
        r = min(r + 1, height - 1)
    elif a == 2:
        c = min(c + 1, width - 1)
    else:
        r = max(r - 1, 0)
    return r * width + c


@numba.njit(cache=True)
def _env_step(kinds, width, height, s, a, slippery, rng):
    if slippery:
        a = (a + rng.integers(0, 3) - 1) % 4
    ns = _move(width, height, s, a)
    reward = 1.0 if kinds[ns] == 2 else 0.0
    return ns, reward, kinds[ns] != 0


@numba.njit(cache=True)
def _epsilon(step, eps_min, eps_max, decay):
    return eps_min + (eps_max - eps_min) * np.exp(-step * decay)


@numba.njit(cache=True)
def _q_update(q, s, a, r, s_next, terminal, alpha, gamma):
    best = 0.0
    if not terminal:
        best = q[s_next, 0]
        for b in range(1, q.shape[1]):
            if q[s_next, b] > best:
                best = q[s_next, b]
    q[s, a] = (1.0 - alpha) * q[s, a] + alpha * (r + gamma * best)
    return q[s, a]


@numba.njit(cache=True)
def _greedy(q, s):
    best = 0
    for a in range(1, q.shape[1]):
        if q[s, a] > q[s, best]:
            best = a
    return best


@numba.njit(cache=True)
def _greedy_random_tie(q, s, rng):
    top = q[s, 0]
    for a in range(1, q.shape[1]):
        if q[s, a] > top:
            top = q[s, a]
    ties = 0
    for a in range(q.shape[1]):
        if q[s, a] == top:
            ties += 1
    pick = rng.integers(0, ties) if ties > 1 else 0
    for a in range(q.shape[1]):
        if q[s, a] == top:
            if pick == 0:
                return a
            pick -= 1
    return 0


@numba.njit(cache=True)
def _corrupt(q, kappa, rng):
    out = np.empty_like(q)
    for s in range(q.shape[0]):
        for a in range(q.shape[1]):
            out[s, a] = q[s, a] + kappa * rng.random()
    return out


@numba.njit(cache=True)
def _divergence(own, other, visited, use_visited):
    total = 0.0
    for s in range(own.shape[0]):
        for a in range(own.shape[1]):
            if use_visited and not visited[s, a]:
                continue
            total += other[s, a] - own[s, a]
    return total


@numba.njit(cache=True)
def _argmax_positive(scores, skip):
    best = -1
    best_score = 0.0
    for j in range(scores.shape[0]):
        if j != skip and scores[j] > best_score:
            best = j
            best_score = scores[j]
    return best


@numba.njit(cache=True)
def _tally(votes, n_ids):
    counts = np.zeros(n_ids, dtype=np.int64)
    for v in votes:
        if v >= 0:
            counts[v] += 1
    top = 0
    for k in range(1, n_ids):
        if counts[k] > counts[top]:
            top = k
    if 2 * counts[top] > votes.shape[0]:
        return top
    return -1


@numba.njit(cache=True)
def _adjust(n, detected, lam):
    w = np.empty(n)
    if detected < 0:
        for k in range(n):
            w[k] = 1.0 / n
        return w
    for k in range(n):
        w[k] = (1.0 + lam / (n - 1)) / n
    w[detected] = (1.0 - lam) / n
    return w


@numba.njit(cache=True)
def _compound(current, detected, lam):
    n = current.shape[0]
    if detected < 0:
        return current.copy()
    factors = _adjust(n, detected, lam)
    out = np.empty(n)
    total = 0.0
    for k in range(n):
        out[k] = current[k] * factors[k] * n
        total += out[k]
    for k in range(n):
        out[k] /= total
    return out


@numba.njit(cache=True)
def _combine_q(tables, weights):
    out = np.zeros(tables.shape[1:])
    for l in range(tables.shape[0]):
        w = weights[l]
        for s in range(tables.shape[1]):
            for a in range(tables.shape[2]):
                out[s, a] += w * tables[l, s, a]
    return out


@numba.njit(cache=True)
def _grow(buf, used):
    if used < buf.shape[0]:
        return buf
    bigger = np.empty((2 * buf.shape[0],) + buf.shape[1:], dtype=buf.dtype)
    bigger[:used] = buf[:used]
    return bigger


@numba.njit(cache=True)
def _train(kinds, width, height, starts, slippery, broken, detection, compound, use_visited,
           alpha, gamma, eps_min, eps_max, decay, max_steps, n_episodes,
           window, lam, kappa, warmup, rng):
    n = starts.shape[0]
    n_states = kinds.shape[0]
    Q = np.zeros((n, n_states, 4))
    visited = np.zeros((n, n_states, 4), dtype=np.bool_)
    W = np.full((n, n), 1.0 / n)
    pos = starts.copy()
    ep_len = np.zeros(n, dtype=np.int64)
    successes = np.zeros(n, dtype=np.int64)
    episodes = np.zeros(n, dtype=np.int64)
    total_episodes = 0
    decisions = np.empty((1024, n), dtype=np.int64)
    nominations = np.empty((1024, n), dtype=np.int64)
    post = np.empty(1024, dtype=np.bool_)
    rounds = 0
    tick = 0
    cand = np.empty(n, dtype=np.int64)
    scores = np.empty(n)
    votes = np.empty(n, dtype=np.int64)
    while total_episodes < n * n_episodes:
        eps = _epsilon(tick, eps_min, eps_max, decay)
        for i in range(n):
            s = pos[i]
            if rng.random() < eps:
                a = rng.integers(0, 4)
            else:
                a = _greedy_random_tie(Q[i], s, rng)
            ns, r, done = _env_step(kinds, width, height, s, a, slippery, rng)
            _q_update(Q[i], s, a, r, ns, done, alpha, gamma)
            visited[i, s, a] = True
            ep_len[i] += 1
            if done or ep_len[i] >= max_steps:
                if r > 0.0:
                    successes[i] += 1
                episodes[i] += 1
                total_episodes += 1
                pos[i] = starts[i]
                ep_len[i] = 0
            else:
                pos[i] = ns
        tick += 1
        if tick % window != 0:
            continue
        shared = Q.copy()
        if broken >= 0:
            shared[broken] = _corrupt(Q[broken], kappa, rng)
        if detection:
            for i in range(n):
                for j in range(n):
                    scores[j] = _divergence(Q[i], shared[j], visited[i], use_visited)
                cand[i] = _argmax_positive(scores, i)
            decisions = _grow(decisions, rounds)
            nominations = _grow(nominations, rounds)
            post = _grow(post, rounds)
            nominations[rounds] = cand
            for i in range(n):
                votes[0] = cand[i]
                k = 1
                for j in range(n):
                    if j != i:
                        votes[k] = cand[j]
                        k += 1
                verdict = _tally(votes, n)
                decisions[rounds, i] = verdict
                if compound:
                    W[i] = _compound(W[i], verdict, lam)
                else:
                    W[i] = _adjust(n, verdict, lam)
            post[rounds] = total_episodes >= n * warmup
            rounds += 1
        own_view = shared.copy()
        for i in range(n):
            own_view[i] = Q[i]
            Q_new = _combine_q(own_view, W[i])
            own_view[i] = shared[i]
            visited[i] = False
            Q[i] = Q_new
    return (Q, decisions[:rounds].copy(), nominations[:rounds].copy(), post[:rounds].copy(),
            successes, episodes, tick)


@numba.njit(cache=True)
def _evaluate(kinds, width, height, Q, agents, starts, n_eval, max_steps, slippery, rng):
    wins = 0
    for _ in range(n_eval):
        for i in agents:
            s = starts[i]
            reached = False
            for _t in range(max_steps):
                s, r, done = _env_step(kinds, width, height, s, _greedy(Q[i], s), slippery, rng)
                if done:
                    reached = r > 0.0
                    break
            if reached:
                wins += 1
                break
    return wins


# -- public API ---------------------------------------------------------------

def env_step(world: GridWorld, state: int, action: int, rng: Optional[np.random.Generator] = None):
    """Move one cell (clipped at walls). Returns ``(next_state, reward, done)``."""
    if world.is_terminal(state):
        raise TerminalStateError(f"state {state} {world.cell(state)} is terminal")
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"unknown action {action}")
    if world.slippery and rng is None:
        raise ValueError("a slippery world needs a random generator")
    ns, r, done = _env_step(world.kinds, world.width, world.height, int(state), int(action),
                            world.slippery, rng if rng is not None else np.random.default_rng(0))
    return int(ns), float(r), bool(done)


def epsilon(step: int, params: LearningParams) -> float:
    return float(_epsilon(float(step), params.eps_min, params.eps_max, params.decay_rate))


def q_update(q: np.ndarray, s: int, a: int, r: float, s_next: int, params: LearningParams = None,
             terminal: bool = False, alpha: float = None, gamma: float = None) -> float:
    """In-place Q-learning update of entry (s, a); returns its new value.

    `alpha` and `gamma` override the rates in `params` (which may then be
    omitted); a zero `alpha` is allowed here and leaves the table unchanged.
    """
    alpha = params.learning_rate if alpha is None else alpha
    gamma = params.discount if gamma is None else gamma
    if q.dtype != np.float64 or not q.flags.c_contiguous:
        raise ValueError("q must be a C-contiguous float64 array")
    return float(_q_update(q, int(s), int(a), float(r), int(s_next), bool(terminal), float(alpha), float(gamma)))


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Per-state argmax action, lowest index on ties."""
    return np.argmax(q, axis=1)


def corrupt_shared_q(q: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """The table a broken agent shares: its own plus uniform[0, kappa) inflation per entry."""
    return _corrupt(np.ascontiguousarray(q, dtype=float), float(kappa), rng)


def fakeness_scores(own_q: np.ndarray, shared_qs: Mapping[int, np.ndarray], visited=None) -> dict:
    """Summed excess ``Q_j - Q_i`` per neighbor, over visited entries or the whole table."""
    own = np.ascontiguousarray(own_q, dtype=float)
    use_visited = visited is not None
    mask = np.asarray(visited, dtype=bool) if use_visited else np.zeros(own.shape, dtype=bool)
    return {
        j: float(_divergence(own, np.ascontiguousarray(q, dtype=float), mask, use_visited))
        for j, q in shared_qs.items()
    }


def local_fake_candidate(own_q: np.ndarray, shared_qs: Mapping[int, np.ndarray], visited=None) -> Optional[int]:
    """Neighbor with the largest positive excess, or None if nobody exceeds own values."""
    scores = fakeness_scores(own_q, shared_qs, visited)
    best, best_score = None, 0.0
    for j in sorted(scores):
        if scores[j] > best_score:
            best, best_score = j, scores[j]
    return best


def tally_votes(votes: Sequence[Optional[int]]) -> Optional[int]:
    """Majority verdict: the most-named id if it holds strictly more than half the votes cast."""
    votes = list(votes)
    if not votes:
        return None
    named = [v for v in votes if v is not None]
    if not named:
        return None
    ids = sorted(set(named))
    encoded = np.array([ids.index(v) if v is not None else -1 for v in votes], dtype=np.int64)
    winner = _tally(encoded, len(ids))
    return None if winner < 0 else ids[winner]


def adjust_weights(n: int, detected: Optional[int], lam: float) -> np.ndarray:
    """Combination weights over a neighborhood of `n` with position `detected` down-weighted."""
    if not 0 < lam < 1:
        raise ValueError(f"lam must lie strictly between 0 and 1, got {lam}")
    if n < 1:
        raise ValueError("neighborhood must be non-empty")
    if detected is not None:
        if n < 2:
            raise ValueError("cannot redistribute weight in a neighborhood of one")
        if not 0 <= detected < n:
            raise ValueError(f"detected position {detected} outside neighborhood of {n}")
    return _adjust(n, -1 if detected is None else int(detected), float(lam))


def update_weights(current, detected: Optional[int], lam: float, memory: str = "compound") -> np.ndarray:
    """Weights after one vote under the given memory rule."""
    current = np.ascontiguousarray(current, dtype=float)
    if memory == "reset":
        return adjust_weights(current.size, detected, lam)
    adjust_weights(current.size, detected, lam)  # validation
    return _compound(current, -1 if detected is None else int(detected), float(lam))


def combine_q(tables: Sequence[np.ndarray], weights) -> np.ndarray:
    stack = np.ascontiguousarray(np.stack([np.asarray(t, dtype=float) for t in tables]))
    weights = np.ascontiguousarray(weights, dtype=float)
    if weights.shape != (stack.shape[0],):
        raise ValueError(f"{stack.shape[0]} tables but weights of shape {weights.shape}")
    if stack.ndim != 3:
        raise ValueError("tables must be 2-D state x action arrays of one shape")
    return _combine_q(stack, weights)


def run_marl(
    world: GridWorld,
    params: LearningParams,
    voting: VotingConfig,
    n_agents: int,
    broken_agent: Optional[int],
    detection: bool,
    rng: np.random.Generator,
    n_eval: int = 1000,
    warmup_episodes: int = 100,
) -> RunStats:
    """Train `n_agents` with periodic table sharing, then evaluate greedy policies.

    Training stops once the agents have completed ``n_agents * n_episodes``
    episodes between them (each restarts from its own start cell as soon as
    it finishes). A greedy evaluation episode succeeds when any intact agent
    reaches the goal within `max_steps`.
    """
    if n_agents < 2:
        raise ValueError("need at least two agents to share tables")
    if len(world.starts) < n_agents:
        raise ValueError(f"world defines {len(world.starts)} start cells for {n_agents} agents")
    if broken_agent is not None and not 0 <= broken_agent < n_agents:
        raise ValueError(f"broken agent {broken_agent} is not an agent id")
    broken = -1 if broken_agent is None else int(broken_agent)
    starts = np.array(world.starts[:n_agents], dtype=np.int64)
    Q, decisions, nominations, post, successes, episodes, ticks = _train(
        world.kinds, world.width, world.height, starts, world.slippery, broken,
        bool(detection), voting.weight_memory == "compound", voting.aggregation == "visited",
        params.learning_rate, params.discount, params.eps_min, params.eps_max, params.decay_rate,
        params.max_steps, params.n_episodes, voting.window, voting.lam, voting.kappa,
        warmup_episodes, rng,
    )
    intact = np.array([i for i in range(n_agents) if i != broken], dtype=np.int64)
    wins = _evaluate(world.kinds, world.width, world.height, Q, intact, starts,
                     n_eval, params.max_steps, world.slippery, rng)
    return RunStats(
        success_rate=wins / n_eval,
        detection=bool(detection),
        broken_agent=broken,
        decisions=decisions,
        nominations=nominations,
        post_warmup=post,
        training_success=successes / np.maximum(episodes, 1),
        ticks=int(ticks),
        tables=Q,
    )
