"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Set FDM_NO_NUMBA=1 to force the numpy fallbacks (also used automatically when
numba is unavailable). Both paths compute identical results; see
benchmarks/bench_kernels.py for a speed comparison.
"""
import os

import numpy as np

_FORCE_NUMPY = os.environ.get("FDM_NO_NUMBA", "0") not in ("", "0")

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover
    _HAS_NUMBA = False

USE_NUMBA = _HAS_NUMBA and not _FORCE_NUMPY


# ---------------------------------------------------------------------------
# mu-law companding (continuous-value tokenizer)

def _mu_law_encode_np(x, mu, m_clip, n_bins):
    f = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu * m_clip)
    f = np.clip(f, -1.0, 1.0)
    bins = np.floor((f + 1.0) / 2.0 * n_bins).astype(np.int64)
    return np.clip(bins, 0, n_bins - 1)


def _mu_law_decode_np(bins, mu, m_clip, n_bins):
    centers = (bins.astype(np.float64) + 0.5) / n_bins * 2.0 - 1.0
    return np.sign(centers) * (np.expm1(np.abs(centers) * np.log1p(mu * m_clip)) / mu)


if USE_NUMBA:

    @njit(cache=True)
    def _mu_law_encode_nb(x, mu, m_clip, n_bins):  # pragma: no cover - jit
        out = np.empty(x.shape[0], dtype=np.int64)
        log_denom = np.log1p(mu * m_clip)
        for i in range(x.shape[0]):
            v = x[i]
            s = 1.0 if v >= 0 else -1.0
            f = s * np.log1p(mu * abs(v)) / log_denom
            if f < -1.0:
                f = -1.0
            elif f > 1.0:
                f = 1.0
            b = int(np.floor((f + 1.0) / 2.0 * n_bins))
            if b < 0:
                b = 0
            elif b > n_bins - 1:
                b = n_bins - 1
            out[i] = b
        return out


def mu_law_encode(x, mu, m_clip, n_bins):
    """Compand x and quantize into [0, n_bins). x is a 1-D float64 array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return _mu_law_encode_nb(x, mu, m_clip, n_bins)
    return _mu_law_encode_np(x, mu, m_clip, n_bins)


def mu_law_decode(bins, mu, m_clip, n_bins):
    """Map bin indices back to bin-center values through the inverse compander."""
    bins = np.ascontiguousarray(bins, dtype=np.int64)
    return _mu_law_decode_np(bins, mu, m_clip, n_bins)


# ---------------------------------------------------------------------------
# 2-opt local search (TSP oracle)

def _two_opt_np(coords, tour):
    n = tour.shape[0]
    tour = tour.copy()
    pts = coords[tour]
    improved = True
    while improved:
        improved = False
        pts = coords[tour]
        d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
        for i in range(n - 1):
            i2 = i + 1
            # delta of reversing tour[i+1 .. j]
            js = np.arange(i + 2, n)
            j2 = (js + 1) % n
            delta = d[i, js] + d[i2, j2] - d[i, i2] - d[js, j2]
            k = int(np.argmin(delta)) if js.size else -1
            if js.size and delta[k] < -1e-12:
                j = int(js[k])
                tour[i + 1 : j + 1] = tour[i + 1 : j + 1][::-1]
                improved = True
                break
    return tour


if USE_NUMBA:

    @njit(cache=True)
    def _two_opt_nb(coords, tour):  # pragma: no cover - jit
        n = tour.shape[0]
        tour = tour.copy()
        improved = True
        while improved:
            improved = False
            for i in range(n - 1):
                a = tour[i]
                b = tour[i + 1]
                dab = np.sqrt(
                    (coords[a, 0] - coords[b, 0]) ** 2 + (coords[a, 1] - coords[b, 1]) ** 2
                )
                best_delta = -1e-12
                best_j = -1
                for j in range(i + 2, n):
                    c = tour[j]
                    e = tour[(j + 1) % n]
                    dac = np.sqrt(
                        (coords[a, 0] - coords[c, 0]) ** 2
                        + (coords[a, 1] - coords[c, 1]) ** 2
                    )
                    dbe = np.sqrt(
                        (coords[b, 0] - coords[e, 0]) ** 2
                        + (coords[b, 1] - coords[e, 1]) ** 2
                    )
                    dce = np.sqrt(
                        (coords[c, 0] - coords[e, 0]) ** 2
                        + (coords[c, 1] - coords[e, 1]) ** 2
                    )
                    delta = dac + dbe - dab - dce
                    if delta < best_delta:
                        best_delta = delta
                        best_j = j
                if best_j >= 0:
                    lo = i + 1
                    hi = best_j
                    while lo < hi:
                        t = tour[lo]
                        tour[lo] = tour[hi]
                        tour[hi] = t
                        lo += 1
                        hi -= 1
                    improved = True
                    break
        return tour


def two_opt(coords, tour):
    """Improve a tour with first-improvement 2-opt passes to local optimality.

    Scans edge pairs in index order and applies the best reversal for the
    earliest improvable i, restarting until no move improves the tour.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    tour = np.ascontiguousarray(tour, dtype=np.int64)
    if USE_NUMBA:
        return _two_opt_nb(coords, tour)
    return _two_opt_np(coords, tour)


# ---------------------------------------------------------------------------
# relative-position gather/scatter for attention

def _rel_gather_np(P, mem_len):
    B, H, T, K = P.shape
    i = np.arange(T)[:, None]
    j = np.arange(K)[None, :]
    dist = i + mem_len - j
    idx = np.clip(dist, 0, K - 1)
    out = np.take_along_axis(P, np.broadcast_to(idx, (B, H, T, K)), axis=3)
    out[:, :, (dist < 0) | (dist >= K)] = 0.0
    return out


def _rel_scatter_np(dBD, mem_len):
    B, H, T, K = dBD.shape
    dP = np.zeros_like(dBD)
    i = np.arange(T)[:, None]
    j = np.arange(K)[None, :]
    dist = i + mem_len - j
    valid = (dist >= 0) & (dist < K)
    ii, jj = np.nonzero(valid)
    np.add.at(dP, (slice(None), slice(None), ii, dist[ii, jj]), dBD[:, :, ii, jj])
    return dP


if USE_NUMBA:

    @njit(cache=True)
    def _rel_gather_nb(P, mem_len):  # pragma: no cover - jit
        B, H, T, K = P.shape
        out = np.zeros((B, H, T, K), dtype=P.dtype)
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    for j in range(K):
                        d = i + mem_len - j
                        if 0 <= d < K:
                            out[b, h, i, j] = P[b, h, i, d]
        return out

    @njit(cache=True)
    def _rel_scatter_nb(dBD, mem_len):  # pragma: no cover - jit
        B, H, T, K = dBD.shape
        dP = np.zeros((B, H, T, K), dtype=dBD.dtype)
        for b in range(B):
            for h in range(H):
                for i in range(T):
                    for j in range(K):
                        d = i + mem_len - j
                        if 0 <= d < K:
                            dP[b, h, i, d] += dBD[b, h, i, j]
        return dP


def rel_gather(P, mem_len):
    """BD[b,h,i,j] = P[b,h,i, i+mem_len-j]; out-of-range distances read as 0.

    P holds per-(query, distance) position scores; the gather aligns them to
    (query, key) coordinates. Invalid (future) distances are masked later.
    """
    if USE_NUMBA:
        return _rel_gather_nb(np.ascontiguousarray(P), mem_len)
    return _rel_gather_np(P, mem_len)


def rel_scatter(dBD, mem_len):
    """Adjoint of rel_gather."""
    if USE_NUMBA:
        return _rel_scatter_nb(np.ascontiguousarray(dBD), mem_len)
    return _rel_scatter_np(dBD, mem_len)


# ---------------------------------------------------------------------------
# sliding-window index construction

def _window_ends_np(counts, seq_len):
    T = counts.shape[0]
    starts, ends = [], []
    e = 0
    acc = 0
    for s in range(T):
        if e < s:
            e = s
            acc = 0
        while e < T and acc < seq_len:
            acc += counts[e]
            e += 1
        if acc >= seq_len:
            starts.append(s)
            ends.append(e)
        else:
            break
        acc -= counts[s]
    return np.array(starts, dtype=np.uint32), np.array(ends, dtype=np.uint32)


if USE_NUMBA:

    @njit(cache=True)
    def _window_ends_nb(counts, seq_len):  # pragma: no cover - jit
        T = counts.shape[0]
        starts = np.empty(T, dtype=np.uint32)
        ends = np.empty(T, dtype=np.uint32)
        m = 0
        e = 0
        acc = 0
        for s in range(T):
            if e < s:
                e = s
                acc = 0
            while e < T and acc < seq_len:
                acc += counts[e]
                e += 1
            if acc >= seq_len:
                starts[m] = s
                ends[m] = e
                m += 1
            else:
                break
            acc -= counts[s]
        return starts[:m], ends[:m]


def minimal_windows(counts, seq_len):
    """For each start s, the minimal exclusive end e with sum(counts[s:e]) >= seq_len.

    Returns (starts, ends); starts that cannot reach seq_len tokens are omitted.
    """
    counts = np.ascontiguousarray(counts, dtype=np.int64)
    if USE_NUMBA:
        return _window_ends_nb(counts, seq_len)
    return _window_ends_np(counts, seq_len)
