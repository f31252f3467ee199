"""Causal multi-head attention with relative position encoding and segment
memory, in the TransformerXL formulation: content and position score terms
with learned global biases, sinusoidal relative encodings projected per block.
"""
import numpy as np

from .. import kernels

NEG_INF = -1e30


def sinusoid_table(n, d, dtype):
    """Relative-distance encodings R[dist] for dist = 0 .. n-1."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d))
    ang = pos * inv[None, :]
    out = np.zeros((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang[:, : d - d // 2])
    return out.astype(dtype)


def _split(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attn_fwd(x, hm, p, heads):
    """x: (B,T,d) queries; hm: (B,K,d) keys/values source (memory + current).

    p is a dict with Wq, Wk, Wv, Wo, Wr, u, v (u/v shaped (heads, head_dim)).
    Positions attend causally: query i sees keys j <= i + (K - T).
    """
    B, T, d = x.shape
    K = hm.shape[1]
    mem_len = K - T
    dh = d // heads

    q = _split(x @ p["Wq"], heads)  # (B,H,T,dh)
    k = _split(hm @ p["Wk"], heads)  # (B,H,K,dh)
    v = _split(hm @ p["Wv"], heads)
    R = sinusoid_table(K, d, x.dtype)
    r = _split((R @ p["Wr"])[None], heads)[0]  # (H,K,dh)

    qu = q + p["u"][None, :, None, :]
    qv = q + p["v"][None, :, None, :]
    AC = qu @ k.transpose(0, 1, 3, 2)  # (B,H,T,K)
    P = qv @ r.transpose(0, 2, 1)[None]  # (B,H,T,K) over distance index
    BD = kernels.rel_gather(P, mem_len)

    scale = 1.0 / np.sqrt(dh)
    S = (AC + BD) * scale
    i = np.arange(T)[:, None]
    j = np.arange(K)[None, :]
    causal = j <= (i + mem_len)
    S = np.where(causal, S, NEG_INF)

    Smax = S.max(-1, keepdims=True)
    E = np.exp(S - Smax)
    A = E / E.sum(-1, keepdims=True)

    ctx = _merge(A @ v)  # (B,T,d)
    out = ctx @ p["Wo"]
    cache = (x, hm, q, k, v, r, R, A, ctx, p, heads, mem_len, scale, causal)
    return out, cache


def attn_bwd(dout, cache):
    x, hm, q, k, v, r, R, A, ctx, p, heads, mem_len, scale, causal = cache
    B, T, d = x.shape
    K = hm.shape[1]

    dWo = ctx.reshape(-1, d).T @ dout.reshape(-1, d)
    dctx = _split(dout @ p["Wo"].T, heads)  # (B,H,T,dh)

    dA = dctx @ v.transpose(0, 1, 3, 2)  # (B,H,T,K)
    dv = A.transpose(0, 1, 3, 2) @ dctx  # (B,H,K,dh)

    dS = A * (dA - (dA * A).sum(-1, keepdims=True))
    dS = np.where(causal, dS, 0.0) * scale

    qu = q + p["u"][None, :, None, :]
    qv = q + p["v"][None, :, None, :]

    # content term
    dqu = dS @ k  # (B,H,T,dh)
    dk = dS.transpose(0, 1, 3, 2) @ qu  # (B,H,K,dh)
    # position term
    dP = kernels.rel_scatter(dS, mem_len)
    dqv = dP @ r[None]  # (B,H,T,dh)
    dh_ = d // heads
    # dr[h,k,:] = sum over (b,t) of dP[b,h,t,k] * qv[b,h,t,:], one gemm per head
    dr = np.stack(
        [
            dP[:, h].reshape(B * T, K).T @ qv[:, h].reshape(B * T, dh_)
            for h in range(heads)
        ]
    )

    du = dqu.sum((0, 2))
    dvb = dqv.sum((0, 2))
    dq = dqu + dqv

    dWr = R.T @ _merge(dr[None]).reshape(K, d)
    dx_q = _merge(dq) @ p["Wq"].T
    dWq = x.reshape(-1, d).T @ _merge(dq).reshape(-1, d)
    dhm = _merge(dk) @ p["Wk"].T + _merge(dv) @ p["Wv"].T
    dWk = hm.reshape(-1, d).T @ _merge(dk).reshape(-1, d)
    dWv = hm.reshape(-1, d).T @ _merge(dv).reshape(-1, d)

    grads = {"Wq": dWq, "Wk": dWk, "Wv": dWv, "Wo": dWo, "Wr": dWr, "u": du, "v": dvb}
    return dx_q, dhm, grads
