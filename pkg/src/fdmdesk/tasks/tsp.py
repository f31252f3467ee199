"""TSP as sequence decoding: uniform instances, a nearest-neighbor + 2-opt
oracle, neighbor-rank action narrowing, and deterministic neighbor features.
"""
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import DataError, UsageError
from ..modality import ContinuousField, DiscreteAction, EnvSpec

SENTINEL = -1.0  # distance slot value for padded neighbor entries


def gen_tsp_instance(n, rng):
    """n i.i.d. uniform points in the unit square."""
    if n < 3:
        raise UsageError(f"TSP instance needs n >= 3, got {n}")
    return rng.random((n, 2))


def tour_length(coords, tour):
    pts = coords[np.asarray(tour)]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(1)).sum())


def nn_tour(coords, start=0):
    """Greedy nearest-neighbor construction, ties to lowest index."""
    n = len(coords)
    visited = np.zeros(n, bool)
    visited[start] = True
    tour = [start]
    cur = start
    for _ in range(n - 1):
        d = np.sqrt(((coords - coords[cur]) ** 2).sum(1))
        d[visited] = np.inf
        nxt = int(np.argmin(d))  # argmin takes the lowest index on ties
        tour.append(nxt)
        visited[nxt] = True
        cur = nxt
    return np.array(tour, np.int64)


@dataclass
class Tour:
    nodes: np.ndarray  # permutation starting at node 0
    length: float


def tsp_oracle(coords):
    """Best of nearest-neighbor tours from every start, each improved by
    first-improvement 2-opt passes. Returned rotated to begin at node 0."""
    coords = np.asarray(coords, np.float64)
    best, best_len = None, np.inf
    for start in range(len(coords)):
        tour = kernels.two_opt(coords, nn_tour(coords, start))
        length = tour_length(coords, tour)
        if length < best_len - 1e-12:
            best, best_len = tour, length
    best = np.roll(best, -int(np.argmax(best == 0)))
    return Tour(best, best_len)


# ---------------------------------------------------------------------------
# state features and action narrowing

@dataclass
class TspState:
    coords: np.ndarray
    current: int
    visited: np.ndarray  # bool mask
    k: int

    @property
    def unvisited(self):
        return np.nonzero(~self.visited)[0]


def nearest_unvisited(state: TspState):
    """Unvisited nodes ordered by (distance to current, node index)."""
    un = state.unvisited
    d = np.sqrt(((state.coords[un] - state.coords[state.current]) ** 2).sum(1))
    order = np.lexsort((un, d))
    return un[order], d[order]


def tsp_state_features(state: TspState):
    """Relative coordinates and distances of the k nearest unvisited nodes,
    in ascending distance order, sentinel-padded when fewer remain."""
    if state.visited.all():
        raise DataError("terminal TSP state has no features")
    nodes, dists = nearest_unvisited(state)
    nodes = nodes[: state.k]
    dists = dists[: state.k]
    feats = np.full((state.k, 3), SENTINEL)
    rel = state.coords[nodes] - state.coords[state.current]
    feats[: len(nodes), 0:2] = rel
    feats[: len(nodes), 2] = dists
    return feats.ravel()


def tsp_expert_rank(state: TspState, expert_next, k):
    """Rank of the expert's chosen node among the k nearest unvisited.

    Returns (rank, covered); covered is False when the expert's node is not
    within the k nearest (the caller records the coverage miss).
    """
    if state.visited[expert_next]:
        raise DataError(f"expert node {expert_next} already visited")
    nodes, _ = nearest_unvisited(state)
    pos = int(np.nonzero(nodes == expert_next)[0][0])
    if pos >= k:
        return k - 1, False
    return pos, True


# ---------------------------------------------------------------------------
# environment

def tsp_env_spec(k, horizon):
    return EnvSpec.make(
        {"feat": ContinuousField(3 * k)}, DiscreteAction(k), horizon, (-8.0, 0.0)
    )


class TspEnv:
    """Visit all nodes by choosing neighbor ranks; terminal reward is the
    negative closed-tour length."""

    def __init__(self, coords, k):
        self.coords = np.asarray(coords, np.float64)
        self.k = k
        self.n = len(coords)
        self.spec = tsp_env_spec(k, horizon=self.n)
        self.state = None
        self.tour = None

    def reset(self):
        self.state = TspState(self.coords, 0, np.zeros(self.n, bool), self.k)
        self.state.visited[0] = True
        self.tour = [0]
        return {"feat": tsp_state_features(self.state)}

    def step(self, action):
        rank = int(np.asarray(action).ravel()[0])
        nodes, _ = nearest_unvisited(self.state)
        rank = min(rank, len(nodes) - 1)
        nxt = int(nodes[rank])
        self.state.visited[nxt] = True
        self.state.current = nxt
        self.tour.append(nxt)
        if self.state.visited.all():
            return None, -tour_length(self.coords, np.array(self.tour)), True
        return {"feat": tsp_state_features(self.state)}, 0.0, False


def expert_episode(coords, k):
    """Walk the oracle tour through TspEnv, narrowing each decision to a rank.

    Returns (timestep list, reward total, covered flags). Uncovered decisions
    fall back to the farthest representable rank, keeping the episode
    consistent with the environment.
    """
    from ..modality import Timestep

    env = TspEnv(coords, k)
    obs = env.reset()
    oracle = tsp_oracle(coords)
    order = list(oracle.nodes[1:])
    steps = []
    covered = []
    ptr = 0
    done = False
    while not done:
        # next oracle node not yet visited (we may have diverged on a miss)
        while ptr < len(order) and env.state.visited[order[ptr]]:
            ptr += 1
        if ptr < len(order):
            rank, cov = tsp_expert_rank(env.state, int(order[ptr]), k)
        else:
            rank, cov = 0, True
        covered.append(cov)
        nxt_obs, reward, done = env.step([rank])
        steps.append(Timestep(obs, [rank], reward))
        obs = nxt_obs
    return steps, covered
