"""Mini Sokoban: instances generated by reverse play from a solved state,
with an expert solution extracted by breadth-first search over the reversed
play graph (so every generated instance is solvable by construction).
"""
from collections import deque

import numpy as np

from ..errors import UsageError
from ..modality import DiscreteAction, DiscreteField, EnvSpec, Timestep

FLOOR, WALL, TARGET, BOX, BOX_ON_TARGET, PLAYER, PLAYER_ON_TARGET = range(7)

# action order: up, down, left, right
DR = (-1, 1, 0, 0)
DC = (0, 0, -1, 1)


def sokoban_env_spec(size):
    return EnvSpec.make(
        {"grid": DiscreteField(7, size * size)},
        DiscreteAction(4),
        horizon=2 * size * size,
    )


class SokobanEnv:
    def __init__(self, size, targets, boxes, player):
        self.size = size
        self.spec = sokoban_env_spec(size)
        self.targets = frozenset(targets)
        self.start_boxes = frozenset(boxes)
        self.start_player = player
        self.boxes = None
        self.player = None
        self.steps_taken = 0

    def _interior(self, cell):
        r, c = cell
        return 1 <= r < self.size - 1 and 1 <= c < self.size - 1

    def reset(self):
        self.boxes = set(self.start_boxes)
        self.player = self.start_player
        self.steps_taken = 0
        return self._obs()

    def _obs(self):
        grid = np.full(self.size * self.size, WALL, np.int64)
        for r in range(1, self.size - 1):
            for c in range(1, self.size - 1):
                grid[r * self.size + c] = FLOOR
        for r, c in self.targets:
            grid[r * self.size + c] = TARGET
        for r, c in self.boxes:
            grid[r * self.size + c] = BOX_ON_TARGET if (r, c) in self.targets else BOX
        r, c = self.player
        grid[r * self.size + c] = PLAYER_ON_TARGET if (r, c) in self.targets else PLAYER
        return {"grid": grid}

    def solved(self):
        return self.boxes == self.targets

    def step(self, action):
        a = int(np.asarray(action).ravel()[0])
        r, c = self.player
        nr, nc = r + DR[a], c + DC[a]
        if self._interior((nr, nc)):
            if (nr, nc) in self.boxes:
                br, bc = nr + DR[a], nc + DC[a]
                if self._interior((br, bc)) and (br, bc) not in self.boxes:
                    self.boxes.discard((nr, nc))
                    self.boxes.add((br, bc))
                    self.player = (nr, nc)
            else:
                self.player = (nr, nc)
        self.steps_taken += 1
        if self.solved():
            return None, 1.0, True
        if self.steps_taken >= self.spec.horizon:
            return None, 0.0, True
        return self._obs(), 0.0, False


def _reverse_neighbors(state, size, targets):
    """Predecessor states under forward play = successors under reverse play
    (walks and pulls)."""
    player, boxes = state
    r, c = player
    for a in range(4):
        nr, nc = r + DR[a], c + DC[a]
        if not (1 <= nr < size - 1 and 1 <= nc < size - 1) or (nr, nc) in boxes:
            continue
        # plain reverse walk
        yield ((nr, nc), boxes), a
        # reverse pull: box behind the player follows into the vacated cell
        br, bc = r - DR[a], c - DC[a]
        if (br, bc) in boxes:
            nb = frozenset(b for b in boxes if b != (br, bc)) | {(r, c)}
            yield ((nr, nc), nb), a


def solve_by_reverse_bfs(env: SokobanEnv):
    """BFS through the reversed play graph from every solved configuration to
    the scrambled start; the reversed path, with each move inverted, is a
    forward solution (and a shortest one, since reverse play is the exact
    transpose of forward play)."""
    size = env.size
    targets = env.targets
    start = (env.start_player, env.start_boxes)
    free = [
        (r, c)
        for r in range(1, size - 1)
        for c in range(1, size - 1)
        if (r, c) not in targets
    ]
    prev = {}
    q = deque()
    for p in free:
        s = (p, frozenset(targets))
        prev[s] = None
        q.append(s)
    if start in prev:
        return []
    found = None
    while q and found is None:
        s = q.popleft()
        for ns, a in _reverse_neighbors(s, size, targets):
            if ns not in prev:
                prev[ns] = (s, a)
                if ns == start:
                    found = ns
                    break
                q.append(ns)
    if found is None:
        return None
    # reverse move a goes direction a; the matching forward move is opposite
    opposite = {0: 1, 1: 0, 2: 3, 3: 2}
    actions = []
    s = found
    while prev[s] is not None:
        s, a = prev[s]
        actions.append(opposite[a])
    return actions


def sokoban_make(seed, size=5, boxes=1, reverse_moves=16, min_solution=6):
    """Generate a solvable instance by reverse play; returns (env, expert actions).

    Scrambles whose shortest solution is under min_solution moves are
    rejected, since near-solved starts are solvable by random walking.
    """
    if size < 5:
        raise UsageError(f"sokoban size must be >= 5, got {size}")
    if boxes < 1:
        raise UsageError("sokoban needs at least 1 box")
    for attempt in range(500):
        rng = np.random.default_rng((seed, attempt))
        interior = [(r, c) for r in range(1, size - 1) for c in range(1, size - 1)]
        picks = rng.choice(len(interior), size=boxes + 1, replace=False)
        targets = frozenset(interior[int(i)] for i in picks[:boxes])
        player = interior[int(picks[boxes])]
        state = (player, targets)
        for _ in range(reverse_moves):
            nbrs = sorted(
                _reverse_neighbors(state, size, targets), key=lambda x: (x[0][0], sorted(x[0][1]))
            )
            if not nbrs:
                break
            state = nbrs[int(rng.integers(len(nbrs)))][0]
        player, box_set = state
        if box_set == targets:
            continue  # degenerate: nothing to push
        env = SokobanEnv(size, targets, box_set, player)
        actions = solve_by_reverse_bfs(env)
        if actions and len(actions) >= min_solution:
            return env, actions
    raise UsageError(f"could not generate sokoban instance for seed {seed}")


def expert_episode(seed, size=5, boxes=1, reverse_moves=16, min_solution=6):
    env, actions = sokoban_make(seed, size, boxes, reverse_moves, min_solution)
    obs = env.reset()
    steps = []
    for a in actions:
        nxt, reward, done = env.step([a])
        steps.append(Timestep(obs, [a], reward))
        obs = nxt
        if done:
            break
    return steps
