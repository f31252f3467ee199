"""Both kernel routes (compiled and numpy fallback) must agree exactly."""
import itertools

import numpy as np
import pytest

from fdmdesk import kernels, vocab


requires_numba = pytest.mark.skipif(
    not kernels.USE_NUMBA, reason="compiled kernels unavailable"
)


@requires_numba
def test_mu_law_routes_agree():
    x = np.random.default_rng(0).uniform(-500, 500, 10_000)
    a = kernels._mu_law_encode_np(x, vocab.MU, vocab.M_CLIP, vocab.N_BINS)
    b = kernels._mu_law_encode_nb(x, vocab.MU, vocab.M_CLIP, vocab.N_BINS)
    assert np.array_equal(a, b)


@requires_numba
def test_two_opt_routes_agree():
    rng = np.random.default_rng(1)
    for n in (5, 12, 30):
        coords = rng.uniform(0, 1, (n, 2))
        tour = np.arange(n)
        a = kernels._two_opt_np(coords, tour.copy())
        b = kernels._two_opt_nb(coords, tour.copy())
        assert np.array_equal(a, b)


@requires_numba
def test_rel_routes_agree():
    rng = np.random.default_rng(2)
    for mem in (0, 16):
        P = np.ascontiguousarray(rng.standard_normal((2, 3, 8, 8 + mem)).astype(np.float32))
        assert np.array_equal(
            kernels._rel_gather_np(P, mem), kernels._rel_gather_nb(P, mem)
        )
        assert np.array_equal(
            kernels._rel_scatter_np(P, mem), kernels._rel_scatter_nb(P, mem)
        )


@requires_numba
def test_window_routes_agree():
    rng = np.random.default_rng(3)
    counts = rng.integers(1, 30, 200).astype(np.int64)
    a = kernels._window_ends_np(counts, 100)
    b = kernels._window_ends_nb(counts, 100)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_rel_gather_reference():
    # BD[b,h,i,j] = P[b,h,i, i + mem - j], zero when the distance index is
    # out of range
    rng = np.random.default_rng(4)
    mem = 3
    P = rng.standard_normal((1, 1, 4, 7))
    BD = kernels.rel_gather(P, mem)
    for i in range(4):
        for j in range(7):
            d = i + mem - j
            want = P[0, 0, i, d] if 0 <= d < 7 else 0.0
            assert BD[0, 0, i, j] == want


def test_rel_scatter_is_gather_transpose():
    # <gather(P), G> == <P, scatter(G)> for all P, G
    rng = np.random.default_rng(5)
    P = rng.standard_normal((2, 2, 6, 10))
    G = rng.standard_normal((2, 2, 6, 10))
    lhs = float((kernels.rel_gather(P, 4) * G).sum())
    rhs = float((P * kernels.rel_scatter(G, 4)).sum())
    assert abs(lhs - rhs) < 1e-9


def brute_force_tour(coords):
    n = len(coords)
    best, best_len = None, np.inf
    for perm in itertools.permutations(range(1, n)):
        tour = (0,) + perm
        d = sum(
            np.linalg.norm(coords[tour[i]] - coords[tour[(i + 1) % n]])
            for i in range(n)
        )
        if d < best_len:
            best, best_len = tour, d
    return best_len


def tour_len(coords, tour):
    return sum(
        np.linalg.norm(coords[tour[i]] - coords[tour[(i + 1) % len(tour)]])
        for i in range(len(tour))
    )


def test_two_opt_never_worse_than_input():
    rng = np.random.default_rng(6)
    for _ in range(10):
        coords = rng.uniform(0, 1, (15, 2))
        tour = np.arange(15)
        out = kernels.two_opt(coords, tour.copy())
        assert tour_len(coords, out) <= tour_len(coords, tour) + 1e-12
        assert sorted(out.tolist()) == list(range(15))


def test_two_opt_near_optimal_small():
    # 2-opt is a local search; on n<=7 it lands within 5% of brute force
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(5, 8))
        coords = rng.uniform(0, 1, (n, 2))
        got = tour_len(coords, kernels.two_opt(coords, np.arange(n)))
        assert got <= brute_force_tour(coords) * 1.05 + 1e-9


def test_minimal_windows_exhaustive_small():
    for counts in ([5, 5, 5], [3, 9, 2, 4, 8], [10], [2, 2, 2, 2, 2, 2]):
        c = np.array(counts, np.int64)
        L = 10
        if c.sum() < L:
            continue
        starts, ends = kernels.minimal_windows(c, L)
        for s, e in zip(starts, ends):
            assert c[s:e].sum() >= L
            # dropping the last timestep makes the window too short: minimal
            assert c[s : e - 1].sum() < L
        # stride-1 coverage: starts are exactly the feasible prefix
        feasible = [s for s in range(len(c)) if c[s:].sum() >= L]
        assert starts.tolist() == feasible
