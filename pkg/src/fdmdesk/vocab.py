"""Unified token layout: text/discrete, continuous, and separator ranges,
plus the non-text codecs (discrete identity, mu-law continuous, image patches).
"""
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import RangeError

TEXT_LO, TEXT_HI = 0, 32000
DISCRETE_LO, DISCRETE_HI = 0, 1024
CONT_LO, CONT_HI = 32000, 33024
PAD_ID = 33024  # first id of the reserved gap [33024, 33204); never emitted
SEPARATOR_ID = 33204
TABLE_SIZE = 33205

MU = 100.0
M_CLIP = 256.0
N_BINS = CONT_HI - CONT_LO  # 1024

PATCH_SIZE = 16
POS_VOCAB = 128
VAR_EPS = 1e-6


def encode_discrete(v, field="value"):
    """Identity map of a discrete value into [0, 1024)."""
    v = int(v)
    if not DISCRETE_LO <= v < DISCRETE_HI:
        raise RangeError(f"discrete {field}={v} outside [{DISCRETE_LO}, {DISCRETE_HI})")
    return v


def decode_discrete(t):
    if not DISCRETE_LO <= t < DISCRETE_HI:
        raise RangeError(f"token {t} outside discrete range [{DISCRETE_LO}, {DISCRETE_HI})")
    return int(t)


def encode_continuous(x):
    """Mu-law compand x, clip to [-1, 1], and quantize into the continuous range."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"continuous value must be finite, got {x}")
    bin_ = int(kernels.mu_law_encode(np.array([x]), MU, M_CLIP, N_BINS)[0])
    return CONT_LO + bin_


def decode_continuous(t):
    if not CONT_LO <= t < CONT_HI:
        raise RangeError(f"token {t} outside continuous range [{CONT_LO}, {CONT_HI})")
    return float(kernels.mu_law_decode(np.array([t - CONT_LO]), MU, M_CLIP, N_BINS)[0])


def encode_continuous_array(xs):
    """Vectorized encode_continuous over a flat float array."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(xs)):
        raise ValueError("continuous values must be finite")
    return kernels.mu_law_encode(xs, MU, M_CLIP, N_BINS) + CONT_LO


@dataclass
class Patch:
    """A normalized 16x16 image patch plus its location within the source image."""

    pixels: np.ndarray  # (16, 16, C) float32, zero mean / unit variance
    row_interval: tuple  # (lo, hi) in [0, 1]
    col_interval: tuple
    raster_index: int


def extract_patches(image):
    """Split an image into normalized 16x16 patches in raster (row-major) order."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, ch = image.shape
    if h % PATCH_SIZE or w % PATCH_SIZE:
        # ragged edges are zero-padded up to the next full patch
        ph = -h % PATCH_SIZE
        pw = -w % PATCH_SIZE
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
    patches = []
    idx = 0
    for r in range(0, image.shape[0], PATCH_SIZE):
        for c in range(0, image.shape[1], PATCH_SIZE):
            px = image[r : r + PATCH_SIZE, c : c + PATCH_SIZE, :]
            mean = px.mean()
            std = math.sqrt(px.var() + VAR_EPS)
            patches.append(
                Patch(
                    pixels=((px - mean) / std).astype(np.float32),
                    row_interval=(r / h, min(r + PATCH_SIZE, h) / h),
                    col_interval=(c / w, min(c + PATCH_SIZE, w) / w),
                    raster_index=idx,
                )
            )
            idx += 1
    return patches


def patch_position_index(interval, mode, rng=None):
    """Quantize a [lo, hi] sub-interval of [0, 1] to a position id in [0, 128).

    Training draws uniformly from the quantized interval; evaluation takes its
    rounded mean (half away from zero), so eval is deterministic.
    """
    lo, hi = interval
    if not (0.0 <= lo <= hi <= 1.0):
        raise ValueError(f"malformed interval [{lo}, {hi}]")
    q_lo = int(math.floor(POS_VOCAB * lo))
    q_lo = min(q_lo, POS_VOCAB - 1)
    q_hi = max(q_lo, int(math.ceil(POS_VOCAB * hi)) - 1)
    q_hi = min(q_hi, POS_VOCAB - 1)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode requires an rng")
        return int(rng.integers(q_lo, q_hi + 1))
    if mode == "eval":
        return int(math.floor((q_lo + q_hi) / 2.0 + 0.5))
    raise ValueError(f"unknown mode {mode!r}")
