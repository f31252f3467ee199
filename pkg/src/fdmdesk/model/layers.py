"""Differentiable primitives (forward + explicit backward) used by the network.

Every *_fwd returns (output, cache); the matching *_bwd takes the upstream
gradient and the cache. All functions preserve the input dtype so the whole
network can run in float32 for training or float64 for gradient checks.
"""
import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
GN_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Truncated-normal init at +-2 std (resampled), the table/projection default."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def linear_fwd(x, W, b=None):
    y = x @ W
    if b is not None:
        y = y + b
    return y, (x, W, b is not None)


def linear_bwd(dy, cache):
    x, W, has_b = cache
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(0) if has_b else None
    return dx, dW, db


def layernorm_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, n).sum(0)
    db = dy.reshape(-1, n).sum(0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    c = erf(x * _INV_SQRT2)
    y = 0.5 * x * (1.0 + c)
    return y, (x, c)


def gelu_bwd(dy, cache):
    x, c = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dy * (0.5 * (1.0 + c) + x * pdf)


def dropout_fwd(x, p, rng):
    if p <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_bwd(dy, cache):
    return dy if cache is None else dy * cache


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# conv / groupnorm (patch embedder)

def conv3x3_fwd(x, W, b):
    """Same-padded 3x3 convolution. x: (N,H,Wd,Cin), W: (3,3,Cin,Cout)."""
    n, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    y = np.zeros((n, h, w, W.shape[3]), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            y += xp[:, di : di + h, dj : dj + w, :] @ W[di, dj]
    return y + b, (xp, W, (n, h, w, cin))


def conv3x3_bwd(dy, cache):
    xp, W, (n, h, w, cin) = cache
    dW = np.zeros_like(W)
    dxp = np.zeros_like(xp)
    flat_dy = dy.reshape(-1, dy.shape[-1])
    for di in range(3):
        for dj in range(3):
            xs = xp[:, di : di + h, dj : dj + w, :]
            dW[di, dj] = xs.reshape(-1, cin).T @ flat_dy
            dxp[:, di : di + h, dj : dj + w, :] += dy @ W[di, dj].T
    db = flat_dy.sum(0)
    return dxp[:, 1:-1, 1:-1, :], dW, db


def groupnorm_fwd(x, g, b, groups):
    """GroupNorm over (H, W, C/groups) per sample and group. x: (N,H,W,C)."""
    n, h, w, c = x.shape
    xg = x.reshape(n, h, w, groups, c // groups)
    mu = xg.mean((1, 2, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean((1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + GN_EPS)
    xhat = (xc * inv).reshape(n, h, w, c)
    return xhat * g + b, (xhat, inv, g, groups)


def groupnorm_bwd(dy, cache):
    xhat, inv, g, groups = cache
    n, h, w, c = xhat.shape
    dg = (dy * xhat).reshape(-1, c).sum(0)
    db = dy.reshape(-1, c).sum(0)
    dxhat = (dy * g).reshape(n, h, w, groups, c // groups)
    xh = xhat.reshape(n, h, w, groups, c // groups)
    m1 = dxhat.mean((1, 2, 4), keepdims=True)
    m2 = (dxhat * xh).mean((1, 2, 4), keepdims=True)
    dx = (inv * (dxhat - m1 - xh * m2)).reshape(n, h, w, c)
    return dx, dg, db


def avgpool_fwd(x, k):
    """Non-overlapping k x k mean pooling. x: (N,H,W,C) with H, W divisible by k."""
    n, h, w, c = x.shape
    y = x.reshape(n, h // k, k, w // k, k, c).mean((2, 4))
    return y, (x.shape, k)


def avgpool_bwd(dy, cache):
    (n, h, w, c), k = cache
    return np.repeat(np.repeat(dy, k, axis=1), k, axis=2) / (k * k)
