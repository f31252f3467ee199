"""Episode persistence, sliding-window indexing, disk caches, and batch/prompt
sampling.

File formats (all integers little-endian, all versioned):
  <task>.shard  magic "FDM1": task id, modality spec block, length-prefixed episodes
  <task>.cache  magic "FDMT": per-episode flattened entry records
  <task>.index  magic "FDMI": packed (path_id, start, end) uint32 triples
"""
import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels, vocab
from .errors import ConfigError, DataError, SpecMismatchError
from .modality import (
    ContinuousAction,
    ContinuousField,
    DiscreteAction,
    DiscreteField,
    Episode,
    EnvSpec,
    ImageField,
    TextAction,
    TextField,
    Timestep,
    TokenStream,
    flatten_episode,
    timestep_token_count,
    validate_obs,
    encode_action,
)
from .textbpe import TextTokenizer

SHARD_MAGIC = b"FDM1"
CACHE_MAGIC = b"FDMT"
INDEX_MAGIC = b"FDMI"
FORMAT_VERSION = 1


@dataclass
class PromptConfig:
    prompt_fraction: float = 0.25
    goal_fraction_of_prompts: float = 0.5
    prompt_len: int = 0  # 0 -> seq_len // 2
    eval_top_quantile: float = 0.10

    def effective_prompt_len(self, seq_len):
        n = self.prompt_len if self.prompt_len > 0 else seq_len // 2
        if n >= seq_len:
            raise ConfigError(f"prompt_len {n} must be < seq_len {seq_len}")
        return n


def normalize_weights(weights):
    if any(w < 0 for w in weights.values()):
        raise ConfigError("sample weights must be >= 0")
    total = sum(weights.values())
    if total <= 0:
        raise ConfigError("sample weights sum to 0")
    return {k: w / total for k, w in weights.items()}


@dataclass
class SequenceSample:
    stream: TokenStream
    task_id: str
    prompted: bool
    goal_conditioned: bool
    path_id: int
    start: int


# ---------------------------------------------------------------------------
# spec (de)serialization

def spec_to_json(spec: EnvSpec):
    fields = {}
    for name, f in spec.obs_fields:
        if isinstance(f, TextField):
            fields[name] = {"kind": "text", "target": f.target}
        elif isinstance(f, ImageField):
            fields[name] = {"kind": "image", "h": f.h, "w": f.w, "c": f.c}
        elif isinstance(f, DiscreteField):
            fields[name] = {"kind": "discrete", "n": f.n, "dim": f.dim}
        elif isinstance(f, ContinuousField):
            fields[name] = {"kind": "continuous", "dim": f.dim}
    a = spec.action
    if isinstance(a, DiscreteAction):
        action = {"kind": "discrete", "n": a.n, "slots": a.slots}
    elif isinstance(a, ContinuousAction):
        action = {"kind": "continuous", "dim": a.dim}
    else:
        action = {"kind": "text", "max_tokens": a.max_tokens, "stop": a.stop}
    return {
        "fields": fields,
        "action": action,
        "horizon": spec.horizon,
        "reward_range": list(spec.reward_range),
    }


def spec_from_json(doc):
    fields = {}
    for name, fd in doc["fields"].items():
        k = fd["kind"]
        if k == "text":
            fields[name] = TextField(fd.get("target", False))
        elif k == "image":
            fields[name] = ImageField(fd["h"], fd["w"], fd["c"])
        elif k == "discrete":
            fields[name] = DiscreteField(fd["n"], fd["dim"])
        elif k == "continuous":
            fields[name] = ContinuousField(fd["dim"])
        else:
            raise DataError(f"unknown field kind {k!r}")
    ad = doc["action"]
    if ad["kind"] == "discrete":
        action = DiscreteAction(ad["n"], ad["slots"])
    elif ad["kind"] == "continuous":
        action = ContinuousAction(ad["dim"])
    elif ad["kind"] == "text":
        action = TextAction(ad["max_tokens"], ad.get("stop", "\n"))
    else:
        raise DataError(f"unknown action kind {ad['kind']!r}")
    return EnvSpec.make(fields, action, doc["horizon"], tuple(doc["reward_range"]))


# ---------------------------------------------------------------------------
# low-level IO

def _read_exact(f, n, path):
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated at offset {f.tell() - len(data)}")
    return data


def _check_header(f, magic, path):
    got = f.read(4)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    ver = _read_exact(f, 1, path)[0]
    if ver != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported version {ver}")


def _encode_episode(ep: Episode, spec: EnvSpec):
    out = bytearray()
    out += struct.pack("<I", len(ep.steps))
    fm = spec.obs_fields
    for step in ep.steps:
        for name, f in fm:
            v = step.obs[name]
            if isinstance(f, TextField):
                b = v.encode("utf-8")
                out += struct.pack("<I", len(b)) + b
            elif isinstance(f, ImageField):
                out += np.asarray(v, np.float32).astype("<f4").tobytes()
            elif isinstance(f, DiscreteField):
                out += np.asarray(v, np.uint16).astype("<u2").tobytes()
            else:
                out += np.asarray(v, np.float64).astype("<f8").tobytes()
        if step.action is None:
            out += b"\x00"
        else:
            out += b"\x01"
            a = spec.action
            if isinstance(a, DiscreteAction):
                out += np.asarray(step.action, np.uint16).astype("<u2").tobytes()
            elif isinstance(a, ContinuousAction):
                out += np.asarray(step.action, np.float64).astype("<f8").tobytes()
            else:
                b = step.action.encode("utf-8")
                out += struct.pack("<I", len(b)) + b
        out += struct.pack("<d", step.reward)
    return bytes(out)


def _decode_episode(buf, spec: EnvSpec, task_id):
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise DataError(f"episode record truncated at byte {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    (T,) = struct.unpack("<I", take(4))
    steps = []
    for _ in range(T):
        obs = {}
        for name, f in spec.obs_fields:
            if isinstance(f, TextField):
                (n,) = struct.unpack("<I", take(4))
                obs[name] = take(n).decode("utf-8")
            elif isinstance(f, ImageField):
                obs[name] = np.frombuffer(take(4 * f.h * f.w * f.c), "<f4").reshape(f.h, f.w, f.c)
            elif isinstance(f, DiscreteField):
                obs[name] = np.frombuffer(take(2 * f.dim), "<u2").astype(np.int64)
            else:
                obs[name] = np.frombuffer(take(8 * f.dim), "<f8").copy()
        has_action = take(1)[0]
        action = None
        if has_action:
            a = spec.action
            if isinstance(a, DiscreteAction):
                action = np.frombuffer(take(2 * a.slots), "<u2").astype(np.int64)
            elif isinstance(a, ContinuousAction):
                action = np.frombuffer(take(8 * a.dim), "<f8").copy()
            else:
                (n,) = struct.unpack("<I", take(4))
                action = take(n).decode("utf-8")
        (reward,) = struct.unpack("<d", take(8))
        steps.append(Timestep(obs, action, reward))
    return Episode(task_id, steps)


def _encode_stream(stream: TokenStream, step_counts):
    out = bytearray()
    out += struct.pack("<I", len(step_counts))
    out += np.asarray(step_counts, "<u4").tobytes()
    out += struct.pack("<I", len(stream))
    for i in range(len(stream)):
        flags = int(stream.loss_mask[i]) | (2 if stream.local_pos[i] < 0 else 0)
        if stream.kinds[i] == 0:
            out += struct.pack("<BBh", 0, flags, int(stream.local_pos[i]))
            out += struct.pack("<I", int(stream.tokens[i]))
        else:
            p = stream.patches[i]
            out += struct.pack("<BBh", 1, flags, int(stream.local_pos[i]))
            out += struct.pack(
                "<ffffB",
                p.row_interval[0],
                p.row_interval[1],
                p.col_interval[0],
                p.col_interval[1],
                p.pixels.shape[2],
            )
            out += p.pixels.astype("<f4").tobytes()
    return bytes(out)


def _decode_stream(f, path):
    (T,) = struct.unpack("<I", _read_exact(f, 4, path))
    step_counts = np.frombuffer(_read_exact(f, 4 * T, path), "<u4").astype(np.int64)
    (n,) = struct.unpack("<I", _read_exact(f, 4, path))
    kinds = np.zeros(n, np.uint8)
    tokens = np.full(n, -1, np.int32)
    mask = np.zeros(n, np.uint8)
    lpos = np.zeros(n, np.int32)
    patches = [None] * n
    ridx = 0
    for i in range(n):
        tag, flags, lp = struct.unpack("<BBh", _read_exact(f, 4, path))
        kinds[i] = tag
        mask[i] = flags & 1
        lpos[i] = lp
        if tag == 0:
            (tokens[i],) = struct.unpack("<I", _read_exact(f, 4, path))
        elif tag == 1:
            rl, rh, cl, ch, c = struct.unpack("<ffffB", _read_exact(f, 17, path))
            px = np.frombuffer(
                _read_exact(f, 4 * vocab.PATCH_SIZE * vocab.PATCH_SIZE * c, path), "<f4"
            ).reshape(vocab.PATCH_SIZE, vocab.PATCH_SIZE, c)
            patches[i] = vocab.Patch(px, (rl, rh), (cl, ch), ridx)
            ridx += 1
        else:
            raise DataError(f"{path}: unknown entry tag {tag} at offset {f.tell() - 4}")
    return (
        TokenStream(
            kinds, tokens, mask, lpos, patches,
            np.full(n, -1, np.int16), np.full(n, -1, np.int16),
        ),
        step_counts,
    )


def resolve_patch_positions(stream: TokenStream, mode, rng=None):
    """Fill pos_row/pos_col for patch entries per the train/eval rule."""
    pos_row = stream.pos_row.copy()
    pos_col = stream.pos_col.copy()
    for i, p in enumerate(stream.patches):
        if p is not None:
            pos_row[i] = vocab.patch_position_index(p.row_interval, mode, rng)
            pos_col[i] = vocab.patch_position_index(p.col_interval, mode, rng)
    return TokenStream(
        stream.kinds, stream.tokens, stream.loss_mask, stream.local_pos,
        stream.patches, pos_row, pos_col,
    )


# ---------------------------------------------------------------------------
# the store

class TrajStore:
    def __init__(self, root):
        self.root = root
        self.cache_root = os.environ.get("FDM_CACHE_DIR", root)
        os.makedirs(self.root, exist_ok=True)
        os.makedirs(self.cache_root, exist_ok=True)
        self._specs = {}
        self._episodes = {}
        self._caches = {}
        self._indexes = {}
        self._tokenizer = None

    # -- tokenizer --------------------------------------------------------

    @property
    def tokenizer_path(self):
        return os.path.join(self.root, "tokenizer.json")

    def set_tokenizer(self, tok: TextTokenizer):
        self._tokenizer = tok
        tok.save(self.tokenizer_path)

    @property
    def tokenizer(self):
        if self._tokenizer is None and os.path.exists(self.tokenizer_path):
            self._tokenizer = TextTokenizer.load(self.tokenizer_path)
        return self._tokenizer

    # -- paths ------------------------------------------------------------

    def shard_path(self, task_id):
        return os.path.join(self.root, f"{task_id}.shard")

    def cache_path(self, task_id):
        return os.path.join(self.cache_root, f"{task_id}.cache")

    def index_path(self, task_id):
        return os.path.join(self.cache_root, f"{task_id}.index")

    def tasks(self):
        return sorted(
            f[: -len(".shard")] for f in os.listdir(self.root) if f.endswith(".shard")
        )

    # -- episodes ---------------------------------------------------------

    def create_task(self, task_id, spec: EnvSpec):
        path = self.shard_path(task_id)
        if os.path.exists(path):
            existing = self.spec(task_id)
            if spec_to_json(existing) != spec_to_json(spec):
                raise SpecMismatchError(f"task {task_id} exists with a different spec")
            return
        tid = task_id.encode("utf-8")
        blob = json.dumps(spec_to_json(spec), sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(SHARD_MAGIC)
            f.write(bytes([FORMAT_VERSION]))
            f.write(struct.pack("<H", len(tid)) + tid)
            f.write(struct.pack("<I", len(blob)) + blob)
        self._specs[task_id] = spec
        self._episodes[task_id] = []

    def spec(self, task_id) -> EnvSpec:
        if task_id not in self._specs:
            self._load_shard(task_id)
        return self._specs[task_id]

    def _load_shard(self, task_id):
        path = self.shard_path(task_id)
        if not os.path.exists(path):
            raise DataError(f"unknown task {task_id!r} (no shard at {path})")
        with open(path, "rb") as f:
            _check_header(f, SHARD_MAGIC, path)
            (tlen,) = struct.unpack("<H", _read_exact(f, 2, path))
            tid = _read_exact(f, tlen, path).decode("utf-8")
            if tid != task_id:
                raise DataError(f"{path}: task id {tid!r} does not match filename")
            (slen,) = struct.unpack("<I", _read_exact(f, 4, path))
            spec = spec_from_json(json.loads(_read_exact(f, slen, path)))
            episodes = []
            while True:
                head = f.read(4)
                if not head:
                    break
                if len(head) != 4:
                    raise DataError(f"{path}: truncated at offset {f.tell() - len(head)}")
                (n,) = struct.unpack("<I", head)
                episodes.append(_decode_episode(_read_exact(f, n, path), spec, task_id))
        self._specs[task_id] = spec
        self._episodes[task_id] = episodes

    def append_episode(self, task_id, episode: Episode):
        """Validate and persist one episode; returns its path id."""
        spec = self.spec(task_id)
        for step in episode.steps:
            validate_obs(step.obs, spec)
            if step.action is not None:
                encode_action(step.action, spec, self.tokenizer)
        blob = _encode_episode(episode, spec)
        with open(self.shard_path(task_id), "ab") as f:
            f.write(struct.pack("<I", len(blob)) + blob)
        eps = self._episodes.setdefault(task_id, [])
        eps.append(episode)
        self._caches.pop(task_id, None)
        self._indexes.pop(task_id, None)
        return len(eps) - 1

    def episodes(self, task_id):
        if task_id not in self._episodes:
            self._load_shard(task_id)
        return self._episodes[task_id]

    def episode_stats(self, task_id):
        eps = self.episodes(task_id)
        return [(ep.ret, ep.length) for ep in eps]

    # -- index ------------------------------------------------------------

    def build_index(self, task_id, seq_len):
        """Minimal sliding windows (stride 1 timestep) of >= seq_len tokens."""
        spec = self.spec(task_id)
        entries = []
        for pid, ep in enumerate(self.episodes(task_id)):
            counts = np.array(
                [timestep_token_count(s, spec, self.tokenizer) for s in ep.steps], np.int64
            )
            if counts.max() > seq_len:
                warnings.warn(
                    f"{task_id} episode {pid}: timestep of {int(counts.max())} tokens "
                    f"exceeds seq_len {seq_len}; episode skipped",
                    stacklevel=2,
                )
                continue
            if counts.sum() < seq_len:
                entries.append((pid, 0, len(counts)))
                continue
            starts, ends = kernels.minimal_windows(counts, seq_len)
            entries.extend((pid, int(s), int(e)) for s, e in zip(starts, ends))
        arr = np.array(entries, np.uint32).reshape(-1, 3)
        path = self.index_path(task_id)
        payload = INDEX_MAGIC + bytes([FORMAT_VERSION])
        payload += struct.pack("<I", len(arr)) + arr.astype("<u4").tobytes()
        _write_if_changed(path, payload)
        self._indexes[task_id] = arr
        return [tuple(int(x) for x in row) for row in arr]

    def read_index(self, task_id):
        if task_id in self._indexes:
            return self._indexes[task_id]
        path = self.index_path(task_id)
        if not os.path.exists(path):
            raise DataError(f"index missing for task {task_id!r}; run build-index")
        with open(path, "rb") as f:
            _check_header(f, INDEX_MAGIC, path)
            (n,) = struct.unpack("<I", _read_exact(f, 4, path))
            arr = np.frombuffer(_read_exact(f, 12 * n, path), "<u4").reshape(n, 3)
            if f.read(1):
                raise DataError(f"{path}: trailing bytes at offset {f.tell() - 1}")
        self._indexes[task_id] = arr
        return arr

    # -- cache ------------------------------------------------------------

    def write_cache(self, task_id):
        """Serialize eval-flattened token streams; no-op when content matches."""
        spec = self.spec(task_id)
        body = bytearray()
        eps = self.episodes(task_id)
        body += CACHE_MAGIC + bytes([FORMAT_VERSION])
        body += struct.pack("<I", len(eps))
        for ep in eps:
            stream = flatten_episode(ep, spec, self.tokenizer, mode="eval")
            counts = [timestep_token_count(s, spec, self.tokenizer) for s in ep.steps]
            body += _encode_stream(stream, counts)
        return _write_if_changed(self.cache_path(task_id), bytes(body))

    def read_cache(self, task_id):
        if task_id in self._caches:
            return self._caches[task_id]
        path = self.cache_path(task_id)
        if not os.path.exists(path):
            raise DataError(f"cache missing for task {task_id!r}; run build-index")
        streams = []
        with open(path, "rb") as f:
            _check_header(f, CACHE_MAGIC, path)
            (n,) = struct.unpack("<I", _read_exact(f, 4, path))
            for _ in range(n):
                streams.append(_decode_stream(f, path))
            if f.read(1):
                raise DataError(f"{path}: trailing bytes at offset {f.tell() - 1}")
        self._caches[task_id] = streams
        return streams

    # -- sampling ---------------------------------------------------------

    def _window_stream(self, task_id, path_id, start, end, budget=None):
        """Window [start, end) as a token stream. With a budget, leading whole
        timesteps are dropped until the window fits: a training sequence must
        hold only complete timesteps, or the first observation would be cut
        mid-way and the final action lost to truncation."""
        stream, counts = self.read_cache(task_id)[path_id]
        offs = np.concatenate([[0], np.cumsum(counts)])
        if budget is not None:
            while start < end - 1 and offs[end] - offs[start] > budget:
                start += 1
        return stream.slice(int(offs[start]), int(offs[end]))

    def _prompt_stream(self, task_id, prompt_len, goal, rng):
        streams = self.read_cache(task_id)
        stream, counts = streams[int(rng.integers(len(streams)))]
        offs = np.concatenate([[0], np.cumsum(counts)])
        T = len(counts)
        if goal:
            s = T
            while s > 0 and offs[T] - offs[s - 1] <= prompt_len:
                s -= 1
            if s == T:  # single oversized timestep: take a suffix anyway
                return stream.slice(max(0, int(offs[T]) - prompt_len), int(offs[T]))
            return stream.slice(int(offs[s]), int(offs[T]))
        s = int(rng.integers(T))
        e = s
        while e < T and offs[e + 1] - offs[s] <= prompt_len:
            e += 1
        if e == s:
            return stream.slice(int(offs[s]), int(offs[s]) + prompt_len)
        return stream.slice(int(offs[s]), int(offs[e]))

    def sample_batch(self, weights, batch_size, seq_len, prompt_cfg: PromptConfig, rng):
        """Draw weighted, prompt-conditioned SequenceSamples of at most seq_len
        tokens, trimmed to whole timesteps (padding happens at batch time)."""
        weights = normalize_weights(weights)
        names = sorted(weights)
        probs = np.array([weights[n] for n in names])
        for n in names:
            if weights[n] > 0 and len(self.read_index(n)) == 0:
                raise ConfigError(f"suite {n!r} has positive weight but no index entries")
        plen = prompt_cfg.effective_prompt_len(seq_len)
        out = []
        for _ in range(batch_size):
            task = names[int(rng.choice(len(names), p=probs))]
            idx = self.read_index(task)
            pid, s, e = (int(x) for x in idx[int(rng.integers(len(idx)))])
            prompted = bool(rng.random() < prompt_cfg.prompt_fraction)
            goal = False
            if prompted:
                goal = bool(rng.random() < prompt_cfg.goal_fraction_of_prompts)
                prompt = self._prompt_stream(task, plen, goal, rng)
                body = self._window_stream(
                    task, pid, s, e, seq_len - len(prompt.tokens)
                )
                if len(prompt.tokens) + len(body.tokens) > seq_len:
                    stream = body  # lone oversized timestep leaves no room
                else:
                    stream = TokenStream.concat([prompt, body])
            else:
                stream = self._window_stream(task, pid, s, e, seq_len)
            stream = resolve_patch_positions(stream, "train", rng)
            out.append(SequenceSample(stream, task, prompted, goal, pid, s))
        return out

    def select_eval_prompt(self, task_id, seq_len, prompt_cfg: PromptConfig, seed=0):
        """Prompt from a top-return demonstration: the longest whole-timestep
        prefix that fits the prompt length. Whole timesteps keep the prompt
        shaped like the training prompts, which never end mid-timestep."""
        eps = self.episodes(task_id)
        if not eps:
            raise DataError(f"task {task_id!r} has no episodes")
        rets = np.array([ep.ret for ep in eps])
        thresh = np.quantile(rets, 1.0 - prompt_cfg.eval_top_quantile)
        eligible = np.nonzero(rets >= thresh)[0]
        pick = int(eligible[np.random.default_rng(seed).integers(len(eligible))])
        ep = eps[pick]
        spec = self.spec(task_id)
        plen = prompt_cfg.effective_prompt_len(seq_len)
        counts = np.array(
            [timestep_token_count(s, spec, self.tokenizer) for s in ep.steps], np.int64
        )
        cum = np.cumsum(counts)
        k = int(np.searchsorted(cum, plen, side="right"))
        if k == 0:  # single oversized timestep: truncate as a last resort
            stream = flatten_episode(
                Episode(ep.task_id, ep.steps[:1]), spec, self.tokenizer, mode="eval"
            )
            return stream.slice(0, plen)
        prompt_ep = Episode(ep.task_id, ep.steps[:k])
        return flatten_episode(prompt_ep, spec, self.tokenizer, mode="eval")


def _write_if_changed(path, payload: bytes):
    """Write payload unless the file already holds identical bytes."""
    if os.path.exists(path):
        with open(path, "rb") as f:
            if hashlib.sha256(f.read()).digest() == hashlib.sha256(payload).digest():
                return False
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)
    return True
