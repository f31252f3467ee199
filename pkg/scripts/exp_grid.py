"""Scratch experiment: steps needed to overfit 50 gridworld expert episodes."""
import os
import sys
import time

import numpy as np

sys.path.insert(0, "src")

import fdmdesk.tasks as tasks
import fdmdesk.train as trainmod
from fdmdesk import evalharness as eh
from fdmdesk.model import network
from fdmdesk.model.config import ModelConfig
from fdmdesk.store import PromptConfig, TrajStore, resolve_patch_positions

TASK = sys.argv[1] if len(sys.argv) > 1 else "gridworld"
STEPS = int(sys.argv[2]) if len(sys.argv) > 2 else 300
SEQ = int(sys.argv[4]) if len(sys.argv) > 4 else 256
PFRAC = float(sys.argv[5]) if len(sys.argv) > 5 else 0.25
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
ROOT = f"/tmp/exp_{TASK}/data"
OUT = f"/tmp/exp_{TASK}/run"

os.makedirs(ROOT, exist_ok=True)
store = TrajStore(ROOT)
if TASK not in store.tasks():
    tasks.gen_dataset(store, TASK, 50, seed=0, params=tasks.DEFAULT_PARAMS[TASK])
    store.build_index(TASK, seq_len=SEQ)
    store.write_cache(TASK)

cfg = ModelConfig(blocks=2, heads=4, width=96, ffn_size=384, seq_len=SEQ, dropout=0.0)
tcfg = trainmod.desk_train_config(total_steps=STEPS, checkpoint_every=0, lr_max=LR,
                                  warmup_steps=30, decay_steps=max(STEPS - 30, 1))
pcfg = PromptConfig(prompt_fraction=PFRAC)
params = network.init_params(cfg, seed=tcfg.seed)

def sample_fn(batch_size, rng):
    return [s.stream for s in store.sample_batch({TASK: 1.0}, batch_size, SEQ, pcfg, rng)]

t0 = time.time()
res = trainmod.train(sample_fn, params, cfg, tcfg, OUT,
                     progress=lambda s, l, lr: s % 50 == 0 and print(f"step {s} loss {l:.4f}", flush=True))
print(f"trained {res.steps} steps in {time.time()-t0:.0f}s", flush=True)

params, _, _ = trainmod.checkpoint_load(res.checkpoint)
tok = store.tokenizer
spec = tasks.task_spec(TASK, tasks.DEFAULT_PARAMS[TASK])
prompt = resolve_patch_positions(store.select_eval_prompt(TASK, SEQ, pcfg, seed=0), "eval", None)

def make_policy(env, seed):
    return eh.ModelPolicy(params, cfg, spec, tok, prompt=prompt)

r = eh.evaluate_task(TASK, tasks.DEFAULT_PARAMS[TASK], make_policy, tok,
                     n_episodes=10, seed=0)
print(f"score {r.score:.4f} mean return {np.mean(r.returns):.4f} "
      f"Rmin {r.r_min:.4f} RE {r.r_expert:.4f}", flush=True)
