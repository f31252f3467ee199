"""Instruction-following gridworld with a breadth-first-search expert.

The agent turns/moves on an open grid holding colored objects; the instruction
names one ("go to the red key") and the episode succeeds when the agent faces
it from the adjacent cell and declares done.
"""
from collections import deque

import numpy as np

from ..errors import UsageError
from ..modality import DiscreteAction, DiscreteField, EnvSpec, TextField, Timestep

COLORS = ("blue", "green", "red")
SHAPES = ("ball", "box", "key")
# grid cell codes: 0 empty, 1..4 agent facing N/E/S/W, 5.. objects
AGENT_BASE = 1
OBJ_BASE = 5
N_CODES = OBJ_BASE + len(COLORS) * len(SHAPES)

# direction order N, E, S, W
DR = (-1, 0, 1, 0)
DC = (0, 1, 0, -1)

TURN_LEFT, TURN_RIGHT, FORWARD, DONE = 0, 1, 2, 3


def obj_code(color, shape):
    return OBJ_BASE + COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def gridworld_env_spec(size):
    return EnvSpec.make(
        {
            "instruction": TextField(),
            "grid": DiscreteField(N_CODES, size * size),
        },
        DiscreteAction(4),
        horizon=4 * size * size,
    )


class GridworldEnv:
    def __init__(self, seed, size=6, n_objects=3):
        if size < 4:
            raise UsageError(f"gridworld size must be >= 4, got {size}")
        if n_objects < 2:
            raise UsageError("gridworld needs at least 2 objects")
        self.size = size
        self.spec = gridworld_env_spec(size)
        rng = np.random.default_rng(seed)
        combos = [(c, s) for c in COLORS for s in SHAPES]
        picks = rng.choice(len(combos), size=n_objects, replace=False)
        cells = rng.choice(size * size, size=n_objects + 1, replace=False)
        self.objects = {}
        for i, pi in enumerate(picks):
            self.objects[(int(cells[i]) // size, int(cells[i]) % size)] = combos[int(pi)]
        self.start = (int(cells[-1]) // size, int(cells[-1]) % size, int(rng.integers(4)))
        target_idx = int(rng.integers(n_objects))
        self.target_cell = list(self.objects)[target_idx]
        color, shape = self.objects[self.target_cell]
        self.instruction = f"go to the {color} {shape}"
        self.agent = None
        self.steps_taken = 0
        self.done = False

    def reset(self):
        self.agent = self.start
        self.steps_taken = 0
        self.done = False
        return self._obs()

    def _obs(self):
        grid = np.zeros(self.size * self.size, np.int64)
        for (r, c), (color, shape) in self.objects.items():
            grid[r * self.size + c] = obj_code(color, shape)
        r, c, d = self.agent
        grid[r * self.size + c] = AGENT_BASE + d
        return {"instruction": self.instruction, "grid": grid}

    def _facing(self):
        r, c, d = self.agent
        return (r + DR[d], c + DC[d])

    def step(self, action):
        a = int(np.asarray(action).ravel()[0])
        r, c, d = self.agent
        if a == TURN_LEFT:
            self.agent = (r, c, (d - 1) % 4)
        elif a == TURN_RIGHT:
            self.agent = (r, c, (d + 1) % 4)
        elif a == FORWARD:
            nr, nc = r + DR[d], c + DC[d]
            if 0 <= nr < self.size and 0 <= nc < self.size and (nr, nc) not in self.objects:
                self.agent = (nr, nc, d)
        elif a == DONE:
            self.done = True
            reward = 1.0 if self._facing() == self.target_cell else 0.0
            return None, reward, True
        self.steps_taken += 1
        if self.steps_taken >= self.spec.horizon:
            self.done = True
            return None, 0.0, True
        return self._obs(), 0.0, False


def expert_actions(env: GridworldEnv):
    """Shortest turn/move sequence to face the target, by BFS over
    (row, col, dir) with actions tried in id order, then a final done."""
    size = env.size
    start = env.start
    target = env.target_cell
    blocked = set(env.objects)

    def goal(state):
        r, c, d = state
        return (r + DR[d], c + DC[d]) == target

    prev = {start: None}
    q = deque([start])
    goal_state = start if goal(start) else None
    while q and goal_state is None:
        state = q.popleft()
        r, c, d = state
        for a in (TURN_LEFT, TURN_RIGHT, FORWARD):
            if a == TURN_LEFT:
                ns = (r, c, (d - 1) % 4)
            elif a == TURN_RIGHT:
                ns = (r, c, (d + 1) % 4)
            else:
                nr, nc = r + DR[d], c + DC[d]
                ns = (
                    (nr, nc, d)
                    if 0 <= nr < size and 0 <= nc < size and (nr, nc) not in blocked
                    else (r, c, d)
                )
            if ns not in prev:
                prev[ns] = (state, a)
                if goal(ns):
                    goal_state = ns
                    break
                q.append(ns)
    if goal_state is None:
        return None
    actions = []
    s = goal_state
    while prev[s] is not None:
        s, a = prev[s]
        actions.append(a)
    actions.reverse()
    actions.append(DONE)
    return actions


def make_solvable(seed, size=6, n_objects=3):
    """Environment plus expert action list; reseeds until the BFS reaches
    the target (blocked layouts are rare but possible)."""
    for attempt in range(100):
        env = GridworldEnv((seed, attempt), size, n_objects)
        actions = expert_actions(env)
        if actions is not None:
            return env, actions
    raise UsageError(f"could not generate solvable gridworld for seed {seed}")


def expert_episode(seed, size=6, n_objects=3):
    env, actions = make_solvable(seed, size, n_objects)
    obs = env.reset()
    steps = []
    for a in actions:
        nxt, reward, done = env.step([a])
        steps.append(Timestep(obs, [a], reward))
        obs = nxt
        if done:
            break
    return steps
