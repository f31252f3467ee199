"""Command line entry point.

Subcommands: gen-data | build-index | train | eval | report | inspect-tokens.
Config files are line-oriented `key = value` with dotted namespaces
(model.*, train.*, prompt.*); command line flags override them.
"""
import argparse
import dataclasses
import os
import sys

import numpy as np

from . import evalharness, tasks, train as trainmod
from .errors import (
    ConfigError,
    DataError,
    FdmError,
    NumericalError,
    RangeError,
    SpecMismatchError,
    UsageError,
)
from .model import network
from .model.config import preset
from .store import PromptConfig, TrajStore, resolve_patch_positions

KIND_NAMES = {0: "symbol", 1: "patch"}


def parse_config_file(path):
    """Flat dict of dotted keys from a `key = value` file."""
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {raw.strip()!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if not k:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[k] = v
    return out


def _coerce(value, to_type):
    if to_type is bool:
        if value in ("true", "1", "yes"):
            return True
        if value in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    return to_type(value)


def _apply_namespace(cfg_obj, items, namespace):
    """Override dataclass fields from dotted config keys; reject unknowns."""
    fields = {f.name: f for f in dataclasses.fields(cfg_obj)}
    updates = {}
    for key, value in items:
        name = key[len(namespace) + 1 :]
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        typ = fields[name].type
        base = {int: int, float: float, bool: bool, str: str}.get(
            getattr(cfg_obj, name).__class__, str
        )
        try:
            updates[name] = _coerce(value, base)
        except ValueError:
            raise ConfigError(f"config key {key!r}: bad value {value!r}") from None
    if not updates:
        return cfg_obj
    if dataclasses.fields(cfg_obj) and getattr(cfg_obj, "__dataclass_params__").frozen:
        return dataclasses.replace(cfg_obj, **updates)
    for k, v in updates.items():
        setattr(cfg_obj, k, v)
    return cfg_obj


def resolve_configs(args):
    """Model/train/prompt configs from preset + config file + flags."""
    doc = parse_config_file(args.config) if getattr(args, "config", None) else {}
    model_cfg = preset(getattr(args, "preset", None) or "desk")
    train_cfg = (
        trainmod.desk_train_config()
        if (getattr(args, "preset", None) or "desk") == "desk"
        else trainmod.TrainConfig()
    )
    prompt_cfg = PromptConfig()
    groups = {"model": [], "train": [], "prompt": []}
    for k, v in doc.items():
        ns = k.split(".", 1)[0]
        if ns not in groups or "." not in k:
            raise ConfigError(f"unknown config key {k!r}")
        groups[ns].append((k, v))
    model_cfg = _apply_namespace(model_cfg, groups["model"], "model")
    train_cfg = _apply_namespace(train_cfg, groups["train"], "train")
    prompt_cfg = _apply_namespace(prompt_cfg, groups["prompt"], "prompt")
    if getattr(args, "steps", None):
        train_cfg = dataclasses.replace(train_cfg, total_steps=args.steps)
    if getattr(args, "seed", None) is not None and hasattr(train_cfg, "seed"):
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    train_cfg = dataclasses.replace(train_cfg, seq_len=model_cfg.seq_len)
    return model_cfg, train_cfg, prompt_cfg


def _log_config(model_cfg, train_cfg, prompt_cfg):
    for ns, cfg in (("model", model_cfg), ("train", train_cfg), ("prompt", prompt_cfg)):
        for f in dataclasses.fields(cfg):
            print(f"{ns}.{f.name} = {getattr(cfg, f.name)}")


TASK_PARAM_FLAGS = ("n", "k", "size", "boxes", "reverse_moves", "min_solution", "n_objects")


def cmd_gen_data(args):
    store = TrajStore(args.root)
    params = {
        name: getattr(args, name)
        for name in TASK_PARAM_FLAGS
        if getattr(args, name, None) is not None
    }
    unknown = set(params) - set(tasks.DEFAULT_PARAMS[args.task])
    if unknown:
        raise UsageError(f"task {args.task!r} does not take {sorted(unknown)}")
    eps, stats = tasks.gen_dataset(store, args.task, args.count, args.seed, params)
    extra = "".join(f", {k} {v:.4g}" if isinstance(v, float) else f", {k} {v}"
                    for k, v in sorted(stats.items()))
    print(f"{args.task}: wrote {len(eps)} episodes to {store.shard_path(args.task)}{extra}")
    return 0


def cmd_build_index(args):
    store = TrajStore(args.root)
    model_cfg, _, _ = resolve_configs(args)
    seq_len = args.seq_len or model_cfg.seq_len
    entries = store.build_index(args.task, seq_len)
    store.write_cache(args.task)
    print(f"{args.task}: {len(entries)} index entries at seq_len {seq_len}; cache written")
    return 0


def _parse_weights(spec_str):
    weights = {}
    for part in spec_str.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            name, w = part.split(":", 1)
            try:
                weights[name.strip()] = float(w)
            except ValueError:
                raise UsageError(f"bad task weight {part!r}") from None
        else:
            weights[part] = 1.0
    if not weights:
        raise UsageError("no tasks given")
    return weights


def cmd_train(args):
    store = TrajStore(args.root)
    model_cfg, train_cfg, prompt_cfg = resolve_configs(args)
    _log_config(model_cfg, train_cfg, prompt_cfg)
    weights = _parse_weights(args.tasks)
    for name in weights:
        store.read_index(name)  # fail fast with a data error if missing
    start_step = 0
    opt_state = None
    ckpt_path = os.path.join(args.out, "model.ckpt")
    if args.resume and os.path.exists(ckpt_path):
        params, opt_state, meta = trainmod.checkpoint_load(ckpt_path)
        start_step = int(meta.get("step", 0))
        print(f"resuming from {ckpt_path} at step {start_step}")
    else:
        params = network.init_params(model_cfg, seed=train_cfg.seed)

    def sample_fn(batch_size, rng):
        samples = store.sample_batch(
            weights, batch_size, train_cfg.seq_len, prompt_cfg, rng
        )
        return [s.stream for s in samples]

    def progress(step, loss, lr):
        print(f"step {step}: loss {loss:.4f}, lr {lr:.3g}")

    result = trainmod.train(
        sample_fn, params, model_cfg, train_cfg, args.out,
        opt_state=opt_state, start_step=start_step,
        meta={"preset": args.preset or "desk", "tasks": sorted(weights)},
        progress=progress,
    )
    print(f"trained {result.steps} steps; checkpoint at {result.checkpoint}")
    return 0


def cmd_eval(args):
    store = TrajStore(args.root)
    model_cfg, _, prompt_cfg = resolve_configs(args)
    params, _, meta = trainmod.checkpoint_load(args.ckpt)
    manifest = tasks.read_manifest(os.path.join(store.root, f"{args.task}.manifest"))
    task_params = {**tasks.DEFAULT_PARAMS[args.task], **tasks.manifest_params(manifest)}
    spec = tasks.task_spec(args.task, task_params)
    tok = store.tokenizer
    prompt = store.select_eval_prompt(args.task, model_cfg.seq_len, prompt_cfg, seed=args.seed)
    prompt = resolve_patch_positions(prompt, "eval", None)

    def make_policy(env, seed):
        return evalharness.ModelPolicy(params, model_cfg, spec, tok, prompt=prompt)

    result = evalharness.evaluate_task(
        args.task, task_params, make_policy, tok,
        n_episodes=args.episodes, seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"{args.task}.result.csv")
    evalharness.report([result], args.out)
    os.replace(os.path.join(args.out, "scores.csv"), out_path)
    print(f"{args.task}: score {result.score:.4f} "
          f"(mean return {float(np.mean(result.returns)):.4f}, "
          f"R_min {result.r_min:.4f}, R_E {result.r_expert:.4f}) -> {out_path}")
    return 0


def cmd_report(args):
    results = []
    for path in args.results:
        for row in evalharness.read_results_csv(path):
            task, n, _, r_min, r_e, score = row
            r = object.__new__(evalharness.EvalResult)
            r.task_id, r.r_min, r.r_expert, r.score = task, r_min, r_e, score
            r.returns = [r_min + score * (r_e - r_min)] * n
            results.append(r)
    csv_path, md_path = evalharness.report(results, args.out)
    print(f"wrote {csv_path} and {md_path}")
    return 0


def cmd_inspect_tokens(args):
    store = TrajStore(args.root)
    idx = store.read_index(args.task)
    if not 0 <= args.entry < len(idx):
        raise UsageError(f"entry {args.entry} out of range (index has {len(idx)})")
    pid, s, e = (int(x) for x in idx[args.entry])
    stream = store._window_stream(args.task, pid, s, e)
    stream = resolve_patch_positions(stream, "eval", None)
    print(f"task {args.task} entry {args.entry}: episode {pid}, timesteps [{s}, {e})")
    print(f"tokens {stream.tokens.tolist()}")
    print(f"mask {stream.loss_mask.tolist()}")
    print(f"{'i':>5} {'kind':>6} {'token':>6} {'mask':>4} {'local':>5} {'row':>4} {'col':>4}")
    for i in range(len(stream.tokens)):
        print(
            f"{i:>5} {KIND_NAMES[int(stream.kinds[i])]:>6} {int(stream.tokens[i]):>6} "
            f"{int(stream.loss_mask[i]):>4} {int(stream.local_pos[i]):>5} "
            f"{int(stream.pos_row[i]):>4} {int(stream.pos_col[i]):>4}"
        )
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="fdmdesk", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, config=True):
        sp.add_argument("--root", default="data", help="trajectory store directory")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--preset", choices=["desk", "db1"], help="model preset")

    g = sub.add_parser("gen-data", help="generate expert episodes into the store")
    common(g, config=False)
    g.add_argument("--task", required=True, choices=sorted(tasks.DEFAULT_PARAMS))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    for name in TASK_PARAM_FLAGS:
        g.add_argument(f"--{name.replace('_', '-')}", type=int, dest=name)
    g.set_defaults(fn=cmd_gen_data)

    b = sub.add_parser("build-index", help="build the sampling index and token cache")
    common(b)
    b.add_argument("--task", required=True)
    b.add_argument("--seq-len", type=int, help="window length (default: model seq_len)")
    b.set_defaults(fn=cmd_build_index)

    t = sub.add_parser("train", help="train a model on indexed tasks")
    common(t)
    t.add_argument("--tasks", required=True, help="comma list, optional :weight per task")
    t.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    t.add_argument("--steps", type=int, help="override total training steps")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="run prompted rollouts and score a checkpoint")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True, choices=sorted(tasks.DEFAULT_PARAMS))
    e.add_argument("--episodes", type=int, default=evalharness.DEFAULT_EPISODES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="aggregate eval result files")
    r.add_argument("results", nargs="+", help="per-task result csv files")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)

    i = sub.add_parser("inspect-tokens", help="dump tokens/masks/positions of one index entry")
    common(i, config=False)
    i.add_argument("--task", required=True)
    i.add_argument("--entry", type=int, default=0)
    i.set_defaults(fn=cmd_inspect_tokens)
    return p


def run_cli(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 3
    except (DataError, RangeError, SpecMismatchError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except FdmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
