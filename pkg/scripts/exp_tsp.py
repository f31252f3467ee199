"""Scratch experiment: how many desk-preset steps does TSP imitation need."""
import os
import sys
import time

import numpy as np

sys.path.insert(0, "src")

import fdmdesk.tasks as tasks
import fdmdesk.train as trainmod
from fdmdesk import evalharness as eh
from fdmdesk.model import network
from fdmdesk.model.config import preset
from fdmdesk.store import PromptConfig, TrajStore, resolve_patch_positions

ROOT = "/tmp/exp_tsp/data"
OUT = "/tmp/exp_tsp/run"
STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 600
EPISODES = int(sys.argv[2]) if len(sys.argv) > 2 else 200

os.makedirs(ROOT, exist_ok=True)
store = TrajStore(ROOT)
if "tsp" not in store.tasks():
    tasks.gen_dataset(store, "tsp", EPISODES, seed=0, params=tasks.DEFAULT_PARAMS["tsp"])
    store.build_index("tsp", seq_len=256)
    store.write_cache("tsp")

cfg = preset("desk", dropout=0.0)
tcfg = trainmod.desk_train_config(total_steps=STEPS, checkpoint_every=0)
pcfg = PromptConfig()
params = network.init_params(cfg, seed=tcfg.seed)

def sample_fn(batch_size, rng):
    return [s.stream for s in store.sample_batch({"tsp": 1.0}, batch_size, 256, pcfg, rng)]

t0 = time.time()
res = trainmod.train(sample_fn, params, cfg, tcfg, OUT,
                     progress=lambda s, l, lr: s % 50 == 0 and print(f"step {s} loss {l:.4f}", flush=True))
print(f"trained {res.steps} steps in {time.time()-t0:.0f}s")

params, _, _ = trainmod.checkpoint_load(res.checkpoint)
tok = store.tokenizer
spec = tasks.task_spec("tsp", tasks.DEFAULT_PARAMS["tsp"])
prompt = resolve_patch_positions(store.select_eval_prompt("tsp", 256, pcfg, seed=0), "eval", None)

def make_policy(env, seed):
    return eh.ModelPolicy(params, cfg, spec, tok, prompt=prompt)

for label, seed in (("train-dist", 0), ("held-out", 5000)):
    r = eh.evaluate_task("tsp", tasks.DEFAULT_PARAMS["tsp"], make_policy, tok,
                         n_episodes=20, seed=seed)
    print(f"{label}: score {r.score:.4f} mean return {np.mean(r.returns):.4f} "
          f"Rmin {r.r_min:.4f} RE {r.r_expert:.4f}", flush=True)
