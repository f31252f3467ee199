"""Optimization: linear warmup + cosine decay schedule, AdamW with decoupled
weight decay, the training loop, and bit-exact checkpoint/resume.

Determinism contract: the sampling and dropout rngs for step s are derived
from (seed, s), so a resumed run replays the identical batch and loss stream.
"""
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .model import network

CKPT_MAGIC = b"FDMC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    batch: int = 512
    seq_len: int = 1024
    warmup_steps: int = 15000
    decay_steps: int = 240000
    lr_max: float = 5e-5
    decay_factor: float = 20.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0  # global norm; <= 0 disables
    total_steps: int = 0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.decay_factor <= 1.0:
            raise ConfigError("decay_factor must be > 1")
        for name in ("batch", "seq_len", "decay_steps", "lr_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def desk_train_config(**overrides):
    """Desk-scale schedule: warmup/decay scaled down, lr raised to suit the
    small model; decay_factor kept."""
    base = dict(
        batch=8, seq_len=256, warmup_steps=150, decay_steps=2400,
        lr_max=1e-3, total_steps=2000, checkpoint_every=500,
    )
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step, cfg: TrainConfig):
    """Linear warmup from 0, cosine decay by cfg.decay_factor, then flat."""
    lr_min = cfg.lr_max / cfg.decay_factor
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    if t <= cfg.decay_steps:
        frac = t / cfg.decay_steps
        return lr_min + 0.5 * (cfg.lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))
    return lr_min


# ---------------------------------------------------------------------------
# AdamW

def _no_decay(name, tensor):
    return tensor.ndim <= 1 or name.startswith("embed.")


@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0

    @staticmethod
    def init(params):
        return AdamWState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(params, grads, state: AdamWState, lr, cfg: TrainConfig):
    """In-place decoupled-weight-decay Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape mismatch for {k}: {g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k}")
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay and not _no_decay(k, p):
            p *= 1.0 - lr * cfg.weight_decay
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
    return params, state


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# checkpoints

def _write_tensors(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)) + nb)
        f.write(bytes([1 if arr.dtype == np.float64 else 0, arr.ndim]))
        for s in arr.shape:
            f.write(struct.pack("<I", s))
        f.write(arr.astype("<f8" if arr.dtype == np.float64 else "<f4").tobytes())


def _read_tensors(f, path):
    from .store import _read_exact

    (n,) = struct.unpack("<I", _read_exact(f, 4, path))
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(f, 2, path))
        name = _read_exact(f, ln, path).decode("utf-8")
        dcode, ndim = _read_exact(f, 2, path)
        shape = tuple(
            struct.unpack("<I", _read_exact(f, 4, path))[0] for _ in range(ndim)
        )
        dt = "<f8" if dcode else "<f4"
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(_read_exact(f, size * (8 if dcode else 4), path), dt)
        out[name] = arr.reshape(shape).copy()
    return out


def checkpoint_save(path, params, opt_state: AdamWState, meta):
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + bytes([CKPT_VERSION]))
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(blob)) + blob)
        f.write(struct.pack("<Q", opt_state.t if opt_state else 0))
        _write_tensors(f, params)
        _write_tensors(f, opt_state.m if opt_state else {})
        _write_tensors(f, opt_state.v if opt_state else {})
    os.replace(tmp, path)


def checkpoint_load(path):
    from .store import _read_exact

    if not os.path.exists(path):
        raise DataError(f"checkpoint missing: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
        ver = _read_exact(f, 1, path)[0]
        if ver != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {ver}")
        (blen,) = struct.unpack("<I", _read_exact(f, 4, path))
        meta = json.loads(_read_exact(f, blen, path))
        (t,) = struct.unpack("<Q", _read_exact(f, 8, path))
        params = _read_tensors(f, path)
        m = _read_tensors(f, path)
        v = _read_tensors(f, path)
        if f.read(1):
            raise DataError(f"{path}: trailing bytes")
    state = AdamWState(m=m, v=v, t=t) if m else None
    return params, state, meta


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0
    checkpoint: str = ""


def step_rngs(seed, step):
    """Independent (sampling, dropout) rng streams for one step."""
    return (
        np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step, 0))),
        np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step, 1))),
    )


def train(sample_fn, params, model_cfg, cfg: TrainConfig, out_dir, opt_state=None,
          start_step=0, log_name="metrics.log", ckpt_name="model.ckpt", meta=None,
          progress=None):
    """Run the batch loop: sample -> gradients -> AdamW at the scheduled lr.

    sample_fn(batch_size, rng) must return a list of TokenStreams of length
    <= seq_len. Logs "step,loss,lr,tokens_per_s" lines and checkpoints at the
    configured cadence; a non-finite loss aborts with the last checkpoint kept.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, ckpt_name)
    if opt_state is None:
        opt_state = AdamWState.init(params)
    result = TrainResult(checkpoint=ckpt_path)
    meta = dict(meta or {})
    mode = "a" if start_step else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        for step in range(start_step, cfg.total_steps):
            t0 = time.perf_counter()
            sample_rng, drop_rng = step_rngs(cfg.seed, step)
            streams = sample_fn(cfg.batch, sample_rng)
            batch = network.batch_from_streams(streams, cfg.seq_len)
            try:
                loss, grads = network.loss_and_grads(
                    params, model_cfg, batch, rng=drop_rng, train=True
                )
            except NumericalError:
                meta.update(step=step, seed=cfg.seed, aborted=True)
                raise
            clip_global_norm(grads, cfg.grad_clip)
            lr = lr_at(step, cfg)
            adamw_step(params, grads, opt_state, lr, cfg)
            dt = time.perf_counter() - t0
            tps = cfg.batch * cfg.seq_len / dt
            log.write(f"{step},{loss:.6f},{lr:.8g},{tps:.1f}\n")
            log.flush()
            result.losses.append(loss)
            result.steps = step + 1
            if progress and (step % 25 == 0 or step + 1 == cfg.total_steps):
                progress(step, loss, lr)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                meta.update(step=step + 1, seed=cfg.seed)
                checkpoint_save(ckpt_path, params, opt_state, meta)
    meta.update(step=cfg.total_steps, seed=cfg.seed)
    checkpoint_save(ckpt_path, params, opt_state, meta)
    return result
