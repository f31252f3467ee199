"""Modality specs, episode records, and flattening of raw timesteps into the
unified token/patch stream with loss masks and local position ids.

Within a timestep the entry order is: text fields, image patches (raster),
tensor fields (row-major), separator, then action tokens. Fields of the same
group are ordered lexicographically by key. The loss mask is 1 exactly on
action entries and on text entries declared as supervised targets.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import vocab
from .errors import DataError, SpecMismatchError

KIND_SYMBOL = 0
KIND_PATCH = 1
ACTION_POS = -1  # local_pos marker for action entries


# ---------------------------------------------------------------------------
# field and action specs

@dataclass(frozen=True)
class TextField:
    target: bool = False  # supervised text target (loss mask 1)


@dataclass(frozen=True)
class ImageField:
    h: int
    w: int
    c: int = 3

    def __post_init__(self):
        if self.h % vocab.PATCH_SIZE or self.w % vocab.PATCH_SIZE:
            raise SpecMismatchError(f"image field dims {self.h}x{self.w} not multiples of 16")


@dataclass(frozen=True)
class DiscreteField:
    n: int
    dim: int = 1

    def __post_init__(self):
        if not 1 <= self.n <= vocab.DISCRETE_HI:
            raise SpecMismatchError(f"discrete cardinality {self.n} outside [1, 1024]")


@dataclass(frozen=True)
class ContinuousField:
    dim: int


@dataclass(frozen=True)
class DiscreteAction:
    n: int
    slots: int = 1


@dataclass(frozen=True)
class ContinuousAction:
    dim: int


@dataclass(frozen=True)
class TextAction:
    max_tokens: int
    stop: str = "\n"


@dataclass(frozen=True)
class EnvSpec:
    obs_fields: tuple  # ((name, field_spec), ...) sorted by name
    action: object
    horizon: int
    reward_range: tuple = (0.0, 1.0)

    @staticmethod
    def make(obs_fields: dict, action, horizon, reward_range=(0.0, 1.0)):
        return EnvSpec(tuple(sorted(obs_fields.items())), action, horizon, reward_range)

    def field_map(self):
        return dict(self.obs_fields)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class Timestep:
    obs: dict
    action: Optional[object]  # int list, float list, or str depending on spec
    reward: float = 0.0


@dataclass
class Episode:
    task_id: str
    steps: list

    @property
    def length(self):
        return len(self.steps)

    @property
    def ret(self):
        return float(sum(s.reward for s in self.steps))


# ---------------------------------------------------------------------------
# token streams

@dataclass
class TokenStream:
    """Flattened per-entry arrays; patch entries carry payloads separately."""

    kinds: np.ndarray  # uint8, 0=symbol 1=patch
    tokens: np.ndarray  # int32 symbol id, -1 at patch entries
    loss_mask: np.ndarray  # uint8
    local_pos: np.ndarray  # int32 within-timestep order, ACTION_POS on actions
    patches: list  # aligned; vocab.Patch or None
    pos_row: np.ndarray  # int16 resolved patch position index, -1 elsewhere
    pos_col: np.ndarray

    def __len__(self):
        return len(self.kinds)

    @property
    def entries(self):
        return [
            ("patch", self.patches[i]) if self.kinds[i] == KIND_PATCH else ("symbol", int(self.tokens[i]))
            for i in range(len(self))
        ]

    @staticmethod
    def empty():
        return TokenStream(
            kinds=np.zeros(0, np.uint8),
            tokens=np.zeros(0, np.int32),
            loss_mask=np.zeros(0, np.uint8),
            local_pos=np.zeros(0, np.int32),
            patches=[],
            pos_row=np.zeros(0, np.int16),
            pos_col=np.zeros(0, np.int16),
        )

    @staticmethod
    def concat(streams):
        if not streams:
            return TokenStream.empty()
        return TokenStream(
            kinds=np.concatenate([s.kinds for s in streams]),
            tokens=np.concatenate([s.tokens for s in streams]),
            loss_mask=np.concatenate([s.loss_mask for s in streams]),
            local_pos=np.concatenate([s.local_pos for s in streams]),
            patches=[p for s in streams for p in s.patches],
            pos_row=np.concatenate([s.pos_row for s in streams]),
            pos_col=np.concatenate([s.pos_col for s in streams]),
        )

    def slice(self, lo, hi):
        return TokenStream(
            self.kinds[lo:hi],
            self.tokens[lo:hi],
            self.loss_mask[lo:hi],
            self.local_pos[lo:hi],
            self.patches[lo:hi],
            self.pos_row[lo:hi],
            self.pos_col[lo:hi],
        )


class _Builder:
    def __init__(self):
        self.kinds, self.tokens, self.mask, self.pos = [], [], [], []
        self.patches, self.prow, self.pcol = [], [], []

    def symbol(self, tok, mask, pos):
        self.kinds.append(KIND_SYMBOL)
        self.tokens.append(tok)
        self.mask.append(mask)
        self.pos.append(pos)
        self.patches.append(None)
        self.prow.append(-1)
        self.pcol.append(-1)

    def patch(self, p, pos, mode, rng):
        self.kinds.append(KIND_PATCH)
        self.tokens.append(-1)
        self.mask.append(0)
        self.pos.append(pos)
        self.patches.append(p)
        self.prow.append(vocab.patch_position_index(p.row_interval, mode, rng))
        self.pcol.append(vocab.patch_position_index(p.col_interval, mode, rng))

    def build(self):
        return TokenStream(
            kinds=np.array(self.kinds, np.uint8),
            tokens=np.array(self.tokens, np.int32),
            loss_mask=np.array(self.mask, np.uint8),
            local_pos=np.array(self.pos, np.int32),
            patches=self.patches,
            pos_row=np.array(self.prow, np.int16),
            pos_col=np.array(self.pcol, np.int16),
        )


def _grouped_fields(spec: EnvSpec):
    text, image, tensor = [], [], []
    for name, f in spec.obs_fields:  # already lexicographic
        if isinstance(f, TextField):
            text.append((name, f))
        elif isinstance(f, ImageField):
            image.append((name, f))
        else:
            tensor.append((name, f))
    return text, image, tensor


def validate_obs(obs, spec: EnvSpec):
    declared = spec.field_map()
    unknown = set(obs) - set(declared)
    if unknown:
        raise SpecMismatchError(f"unknown observation field(s): {sorted(unknown)}")
    missing = set(declared) - set(obs)
    if missing:
        raise SpecMismatchError(f"missing observation field(s): {sorted(missing)}")
    for name, f in declared.items():
        v = obs[name]
        if isinstance(f, TextField):
            if not isinstance(v, str):
                raise SpecMismatchError(f"field {name}: expected text")
        elif isinstance(f, ImageField):
            arr = np.asarray(v)
            if arr.shape != (f.h, f.w, f.c):
                raise SpecMismatchError(f"field {name}: shape {arr.shape} != {(f.h, f.w, f.c)}")
        elif isinstance(f, DiscreteField):
            arr = np.asarray(v).ravel()
            if arr.size != f.dim:
                raise SpecMismatchError(f"field {name}: size {arr.size} != {f.dim}")
            if arr.size and (arr.min() < 0 or arr.max() >= f.n):
                raise SpecMismatchError(f"field {name}: value outside [0, {f.n})")
        elif isinstance(f, ContinuousField):
            arr = np.asarray(v, dtype=np.float64).ravel()
            if arr.size != f.dim:
                raise SpecMismatchError(f"field {name}: size {arr.size} != {f.dim}")
            if not np.all(np.isfinite(arr)):
                raise SpecMismatchError(f"field {name}: non-finite value")
        else:
            raise SpecMismatchError(f"field {name}: unknown spec type {type(f)}")


def encode_action(action, spec: EnvSpec, tokenizer):
    """Token ids for an action value under the env's action spec."""
    a = spec.action
    if isinstance(a, DiscreteAction):
        vals = np.asarray(action).ravel()
        if vals.size != a.slots:
            raise SpecMismatchError(f"action: {vals.size} slots != {a.slots}")
        return [vocab.encode_discrete(int(v), "action") for v in vals]
    if isinstance(a, ContinuousAction):
        vals = np.asarray(action, dtype=np.float64).ravel()
        if vals.size != a.dim:
            raise SpecMismatchError(f"action: dim {vals.size} != {a.dim}")
        return [vocab.encode_continuous(v) for v in vals]
    if isinstance(a, TextAction):
        if not isinstance(action, str):
            raise SpecMismatchError("action: expected text")
        toks = tokenizer.tokenize(action)
        if len(toks) > a.max_tokens:
            raise SpecMismatchError(f"action text tokenizes to {len(toks)} > {a.max_tokens}")
        return toks
    raise SpecMismatchError(f"unknown action spec {type(a)}")


def assemble_timestep(obs, action, spec: EnvSpec, tokenizer=None, mode="eval", rng=None):
    """Flatten one timestep into a TokenStream (obs entries, separator, action)."""
    validate_obs(obs, spec)
    b = _Builder()
    text, image, tensor = _grouped_fields(spec)
    pos = 0
    for name, f in text:
        for t in tokenizer.tokenize(obs[name]) if tokenizer else _require_tok(name):
            b.symbol(t, 1 if f.target else 0, pos)
            pos += 1
    for name, f in image:
        for p in vocab.extract_patches(obs[name]):
            b.patch(p, pos, mode, rng)
            pos += 1
    for name, f in tensor:
        if isinstance(f, DiscreteField):
            for v in np.asarray(obs[name]).ravel():
                b.symbol(vocab.encode_discrete(int(v), name), 0, pos)
                pos += 1
        else:
            for t in vocab.encode_continuous_array(np.asarray(obs[name])):
                b.symbol(int(t), 0, pos)
                pos += 1
    b.symbol(vocab.SEPARATOR_ID, 0, pos)
    if action is not None:
        for t in encode_action(action, spec, tokenizer):
            b.symbol(int(t), 1, ACTION_POS)
    return b.build()


def _require_tok(name):
    raise SpecMismatchError(f"field {name}: text field requires a tokenizer")


def timestep_token_count(step: Timestep, spec: EnvSpec, tokenizer=None):
    """Entry count of assemble_timestep without building patches."""
    text, image, tensor = _grouped_fields(spec)
    n = 1  # separator
    for name, _ in text:
        n += len(tokenizer.tokenize(step.obs[name]))
    for _, f in image:
        n += (f.h // vocab.PATCH_SIZE) * (f.w // vocab.PATCH_SIZE)
    for name, f in tensor:
        n += f.dim
    if step.action is not None:
        a = spec.action
        if isinstance(a, DiscreteAction):
            n += a.slots
        elif isinstance(a, ContinuousAction):
            n += a.dim
        else:
            n += len(tokenizer.tokenize(step.action))
    return n


def flatten_episode(episode: Episode, spec: EnvSpec, tokenizer=None, mode="eval", rng=None):
    """Concatenate per-timestep streams in temporal order."""
    if not episode.steps:
        raise DataError("episode has no timesteps")
    streams = []
    for step in episode.steps:
        try:
            streams.append(assemble_timestep(step.obs, step.action, spec, tokenizer, mode, rng))
        except SpecMismatchError as e:
            raise DataError(f"episode {episode.task_id}: {e}") from e
    return TokenStream.concat(streams)
