"""Synthetic shapes-caption task: render 1-2 colored shapes on a white field,
caption them with a fixed template. The caption text is the supervised target.
"""
import numpy as np

from ..modality import EnvSpec, ImageField, TextAction, Timestep

COLORS = {"red": (1.0, 0.1, 0.1), "green": (0.1, 0.8, 0.1), "blue": (0.1, 0.2, 1.0)}
SHAPES = ("circle", "square", "triangle")
IMG = 32
STOP = "\n"
MAX_CAPTION_TOKENS = 24


def caption_env_spec():
    return EnvSpec.make(
        {"image": ImageField(IMG, IMG, 3)},
        TextAction(MAX_CAPTION_TOKENS, STOP),
        horizon=1,
    )


def _draw_shape(img, shape, color, cx, cy, rad):
    rgb = np.array(COLORS[color], np.float32)
    ys, xs = np.mgrid[0:IMG, 0:IMG]
    if shape == "circle":
        m = (xs - cx) ** 2 + (ys - cy) ** 2 <= rad * rad
    elif shape == "square":
        m = (np.abs(xs - cx) <= rad) & (np.abs(ys - cy) <= rad)
    else:  # triangle pointing up
        m = (ys >= cy - rad) & (ys <= cy + rad) & (np.abs(xs - cx) <= (ys - (cy - rad)) / 2)
    img[m] = rgb


def gen_caption_sample(seed):
    """Deterministic (image, caption) pair; caption ends with the stop char."""
    rng = np.random.default_rng(seed)
    n = 1 if rng.random() < 0.5 else 2
    img = np.ones((IMG, IMG, 3), np.float32)
    parts = []
    centers = [(8, 16), (24, 16)] if n == 2 else [(16, 16)]
    for cx, cy in centers:
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        _draw_shape(img, shape, color, cx + int(rng.integers(-2, 3)), cy + int(rng.integers(-2, 3)), 6)
        parts.append(f"a {color} {shape}")
    return img, " and ".join(parts) + STOP


class CaptionEnv:
    """One-step environment: observe the image, emit the caption text."""

    def __init__(self, seed):
        self.spec = caption_env_spec()
        self.image, self.caption = gen_caption_sample(seed)

    def reset(self):
        return {"image": self.image}

    def step(self, text):
        # exact match, stop character included: a decode that runs into its
        # token cap without emitting the stop does not score
        return None, 1.0 if str(text) == self.caption else 0.0, True


def expert_episode(seed):
    env = CaptionEnv(seed)
    obs = env.reset()
    _, reward, _ = env.step(env.caption)
    return [Timestep(obs, env.caption, reward)]
