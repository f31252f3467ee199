"""Expert-normalized evaluation: prompted greedy rollouts, scoring, reports."""
import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import tasks, vocab
from .errors import SpecMismatchError, UsageError
from .modality import (
    ContinuousAction,
    DiscreteAction,
    TextAction,
    TokenStream,
    assemble_timestep,
)
from .model import network

# Monte Carlo size for the random-policy baseline. Return dispersion across
# tour instances makes a 100-episode estimate too noisy to resolve scores
# near zero, so the baseline uses a larger sample.
RANDOM_EPISODES = 1000
DEFAULT_EPISODES = 10


def tokens_to_action(toks, action_spec, tokenizer):
    if isinstance(action_spec, DiscreteAction):
        return [vocab.decode_discrete(t) for t in toks]
    if isinstance(action_spec, ContinuousAction):
        return np.array([vocab.decode_continuous(t) for t in toks])
    if isinstance(action_spec, TextAction):
        return tokenizer.detokenize(list(toks))
    raise SpecMismatchError(f"unknown action spec {type(action_spec)}")


class ModelPolicy:
    """Greedy (or sampled) decoding against a trained model, with segment
    memory carried across the whole episode including the prompt."""

    def __init__(self, params, cfg, spec, tokenizer, prompt=None, strategy="greedy", seed=0):
        self.params = params
        self.cfg = cfg
        self.spec = spec
        self.tokenizer = tokenizer
        self.prompt = prompt
        self.strategy = strategy
        self.rng = np.random.default_rng(seed)
        self.stop_token = None
        if isinstance(spec.action, TextAction):
            stop = tokenizer.tokenize(spec.action.stop)
            if len(stop) != 1:
                raise SpecMismatchError("stop string must be a single token")
            self.stop_token = stop[0]
        self.memory = None
        self._pending = prompt

    def act(self, obs):
        ctx = assemble_timestep(obs, None, self.spec, self.tokenizer, mode="eval")
        if self._pending is not None:
            ctx = TokenStream.concat([self._pending, ctx])
            self._pending = None
        toks, self.memory = network.decode_step(
            self.params, self.cfg, ctx, self.spec.action, self.strategy,
            self.memory, rng=self.rng, stop_token=self.stop_token,
        )
        return tokens_to_action(toks, self.spec.action, self.tokenizer)


class RandomPolicy:
    """Uniform draws over the action space (text: uniform tokens to stop)."""

    def __init__(self, spec, tokenizer, seed):
        self.spec = spec
        self.tokenizer = tokenizer
        self.rng = np.random.default_rng(seed)

    def act(self, obs):
        a = self.spec.action
        if isinstance(a, DiscreteAction):
            return self.rng.integers(a.n, size=a.slots).tolist()
        if isinstance(a, ContinuousAction):
            return self.rng.uniform(-1.0, 1.0, size=a.dim)
        toks = self.rng.integers(len(self.tokenizer.vocab), size=a.max_tokens).tolist()
        return self.tokenizer.detokenize(toks)


class ExpertPolicy:
    def __init__(self, task, params, env, seed):
        self.ctrl = tasks.expert_controller(task, params, env, seed)

    def act(self, obs):
        return self.ctrl(obs)


def rollout_episode(env, policy):
    obs = env.reset()
    total = 0.0
    done = False
    while not done:
        obs, reward, done = env.step(policy.act(obs))
        total += reward
    return total


def rollout(make_policy, task, task_params, seeds):
    """Return per-episode returns for fresh env/policy pairs at the seeds."""
    rets = []
    for seed in seeds:
        env = tasks.make_env(task, task_params, seed)
        if env.spec != tasks.task_spec(task, task_params):
            raise SpecMismatchError(f"{task}: env spec drifted from task spec")
        rets.append(rollout_episode(env, make_policy(env, seed)))
    return rets


def normalized_score(returns, r_min, r_expert):
    if r_expert == r_min:
        raise UsageError(f"degenerate task: expert return equals random return ({r_min})")
    r = np.asarray(returns, dtype=np.float64)
    return float(np.mean((r - r_min) / (r_expert - r_min)))


@dataclass
class EvalResult:
    task_id: str
    returns: list
    r_min: float
    r_expert: float
    score: float = field(init=False)

    def __post_init__(self):
        self.score = normalized_score(self.returns, self.r_min, self.r_expert)


def evaluate_task(task, task_params, make_policy, tokenizer, n_episodes=DEFAULT_EPISODES,
                  seed=0, random_seed=10_000):
    """Score a policy against the task's expert and random baselines.

    The expert baseline replays the oracle on the same eval seeds, so an
    expert-replay policy scores exactly 1.0. The random baseline is a
    100-episode Monte Carlo estimate on a disjoint seed range.
    """
    seeds = [seed + i for i in range(n_episodes)]
    expert = rollout(
        lambda env, s: ExpertPolicy(task, task_params, env, s), task, task_params, seeds
    )
    rand_seeds = [random_seed + i for i in range(RANDOM_EPISODES)]
    rand = rollout(
        lambda env, s: RandomPolicy(env.spec, tokenizer, s), task, task_params, rand_seeds
    )
    returns = rollout(make_policy, task, task_params, seeds)
    return EvalResult(task, returns, float(np.mean(rand)), float(np.mean(expert)))


CSV_HEADER = ["task", "n", "mean_return", "r_min", "r_expert", "score"]


def _fmt(x):
    return f"{x:.6g}"


def report(results, out_path):
    """Write per-task csv rows, per-domain aggregates, and a markdown summary."""
    if not results:
        raise UsageError("report needs at least one result")
    os.makedirs(out_path, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow([r.task_id, len(r.returns), _fmt(float(np.mean(r.returns))),
                    _fmt(r.r_min), _fmt(r.r_expert), _fmt(r.score)])
    scores = [r.score for r in results]
    frac = float(np.mean([s >= 0.5 for s in scores]))
    w.writerow(["ALL", len(results), "", "", _fmt(float(np.mean(scores))), _fmt(frac)])
    csv_path = os.path.join(out_path, "scores.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    lines = ["# Evaluation summary", ""]
    lines.append("| task | episodes | mean return | R_min | R_expert | score |")
    lines.append("|---|---|---|---|---|---|")
    for r in results:
        lines.append(
            f"| {r.task_id} | {len(r.returns)} | {_fmt(float(np.mean(r.returns)))} "
            f"| {_fmt(r.r_min)} | {_fmt(r.r_expert)} | {_fmt(r.score)} |"
        )
    lines.append("")
    lines.append(f"mean score {_fmt(float(np.mean(scores)))}, "
                 f"{sum(s >= 0.5 for s in scores)} of {len(scores)} tasks at or above 0.5")
    lines.append("")
    md_path = os.path.join(out_path, "summary.md")
    with open(md_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    return csv_path, md_path


def read_results_csv(path):
    """Task rows of a scores.csv back as EvalResult-like tuples."""
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise UsageError(f"{path}: unrecognized results header")
    for row in rows[1:]:
        if row[0] == "ALL":
            continue
        out.append((row[0], int(row[1]), float(row[2]), float(row[3]),
                    float(row[4]), float(row[5])))
    return out
