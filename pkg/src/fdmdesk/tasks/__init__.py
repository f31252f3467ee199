"""Built-in task registry: environment factories, expert controllers, and
expert dataset generation with manifests.
"""
import os

import numpy as np

from ..errors import UsageError
from ..modality import Episode
from ..textbpe import train_text_tokenizer
from . import caption, gridworld, sokoban, tsp

TOKENIZER_VOCAB = 384


def builtin_corpus():
    """Training corpus for the text tokenizer: every instruction and caption
    phrase the built-in tasks can produce."""
    lines = []
    for c in gridworld.COLORS:
        for s in gridworld.SHAPES:
            lines.append(f"go to the {c} {s}")
    singles = [f"a {c} {s}" for c in caption.COLORS for s in caption.SHAPES]
    lines += [s + caption.STOP for s in singles]
    lines += [f"{a} and {b}{caption.STOP}" for a in singles for b in singles[:3]]
    return lines


def default_tokenizer():
    return train_text_tokenizer(builtin_corpus(), TOKENIZER_VOCAB)


DEFAULT_PARAMS = {
    "gridworld": {"size": 6, "n_objects": 3},
    "sokoban": {"size": 5, "boxes": 1, "reverse_moves": 16, "min_solution": 6},
    "tsp": {"n": 10, "k": 10},
    "caption": {},
}


def task_spec(task, params):
    if task == "gridworld":
        return gridworld.gridworld_env_spec(params["size"])
    if task == "sokoban":
        return sokoban.sokoban_env_spec(params["size"])
    if task == "tsp":
        return tsp.tsp_env_spec(params["k"], params["n"])
    if task == "caption":
        return caption.caption_env_spec()
    raise UsageError(f"unknown task {task!r} (have: {sorted(DEFAULT_PARAMS)})")


def make_env(task, params, seed):
    """Deterministic environment instance for an evaluation seed."""
    if task == "gridworld":
        env, _ = gridworld.make_solvable(seed, params["size"], params["n_objects"])
        return env
    if task == "sokoban":
        env, _ = sokoban.sokoban_make(seed, **params)
        return env
    if task == "tsp":
        coords = tsp.gen_tsp_instance(params["n"], np.random.default_rng(seed))
        return tsp.TspEnv(coords, params["k"])
    if task == "caption":
        return caption.CaptionEnv(seed)
    raise UsageError(f"unknown task {task!r}")


def expert_controller(task, params, env, seed):
    """Callable obs -> action replaying the expert on a fresh env instance."""
    if task == "gridworld":
        _, actions = gridworld.make_solvable(seed, params["size"], params["n_objects"])
        it = iter(actions)
        return lambda obs: [next(it)]
    if task == "sokoban":
        _, actions = sokoban.sokoban_make(seed, **params)
        it = iter(actions)
        return lambda obs: [next(it)]
    if task == "tsp":
        order = list(tsp.tsp_oracle(env.coords).nodes[1:])
        state = {"ptr": 0}

        def act(obs):
            while state["ptr"] < len(order) and env.state.visited[order[state["ptr"]]]:
                state["ptr"] += 1
            if state["ptr"] >= len(order):
                return [0]
            rank, _ = tsp.tsp_expert_rank(env.state, int(order[state["ptr"]]), params["k"])
            return [rank]

        return act
    if task == "caption":
        return lambda obs: env.caption
    raise UsageError(f"unknown task {task!r}")


def generate_episodes(task, params, count, seed):
    """Expert episodes for seeds seed..seed+count-1. Returns (episodes, stats)."""
    episodes = []
    stats = {}
    if task == "tsp":
        covered = 0
        total = 0
        for i in range(count):
            coords = tsp.gen_tsp_instance(params["n"], np.random.default_rng(seed + i))
            steps, cov = tsp.expert_episode(coords, params["k"])
            episodes.append(Episode(task, steps))
            covered += sum(cov)
            total += len(cov)
        stats["coverage"] = covered / max(total, 1)
        stats["k"] = params["k"]
    elif task == "gridworld":
        for i in range(count):
            episodes.append(
                Episode(task, gridworld.expert_episode(seed + i, params["size"], params["n_objects"]))
            )
    elif task == "sokoban":
        for i in range(count):
            episodes.append(Episode(task, sokoban.expert_episode(seed + i, **params)))
    elif task == "caption":
        for i in range(count):
            episodes.append(Episode(task, caption.expert_episode(seed + i)))
    else:
        raise UsageError(f"unknown task {task!r}")
    return episodes, stats


def gen_dataset(store, task, count, seed, params=None):
    """Generate an expert dataset into the store and write its manifest."""
    params = {**DEFAULT_PARAMS[task], **(params or {})}
    if store.tokenizer is None:
        store.set_tokenizer(default_tokenizer())
    store.create_task(task, task_spec(task, params))
    episodes, stats = generate_episodes(task, params, count, seed)
    for ep in episodes:
        store.append_episode(task, ep)
    mpath = os.path.join(store.root, f"{task}.manifest")
    with open(mpath, "w", encoding="utf-8") as f:
        f.write(f"task = {task}\n")
        f.write(f"seed_start = {seed}\n")
        f.write(f"count = {count}\n")
        for k in sorted(params):
            f.write(f"param.{k} = {params[k]}\n")
        for k in sorted(stats):
            f.write(f"{k} = {stats[k]}\n")
    return episodes, stats


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def manifest_params(manifest):
    params = {}
    for k, v in manifest.items():
        if k.startswith("param."):
            try:
                params[k[6:]] = int(v)
            except ValueError:
                params[k[6:]] = float(v)
    return params
