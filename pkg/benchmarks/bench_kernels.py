"""Timing comparison of the compiled kernels against their numpy fallbacks.

Run directly: python3 benchmarks/bench_kernels.py
The fallback is the same code path selected by FDM_NO_NUMBA=1.
"""
import time

import numpy as np

from fdmdesk import kernels, vocab


def bench(label, fn, *args, repeat=5):
    fn(*args)  # warm (jit compile, caches)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    print(f"  {label:8s} {best * 1e3:9.3f} ms")


def impls(base):
    out = [("numpy", getattr(kernels, f"_{base}_np"))]
    if kernels.USE_NUMBA:
        out.insert(0, ("numba", getattr(kernels, f"_{base}_nb")))
    return out


def main():
    if not kernels.USE_NUMBA:
        print("note: compiled path unavailable (numba missing or FDM_NO_NUMBA set); "
              "timing the numpy fallback only\n")
    rng = np.random.default_rng(0)

    x = rng.uniform(-300.0, 300.0, 1_000_000)
    print("mu_law_encode, 1e6 values")
    for name, fn in impls("mu_law_encode"):
        bench(name, fn, x, vocab.MU, vocab.M_CLIP, vocab.N_BINS)

    coords = rng.uniform(0.0, 1.0, (60, 2))
    print("two_opt, 60 cities")
    for name, fn in impls("two_opt"):
        bench(name, fn, coords, np.arange(60))

    P = np.ascontiguousarray(rng.standard_normal((8, 4, 256, 512)).astype(np.float32))
    print("rel_gather, (8,4,256,512)")
    for name, fn in impls("rel_gather"):
        bench(name, fn, P, 256)

    print("rel_scatter, (8,4,256,512)")
    for name, fn in impls("rel_scatter"):
        bench(name, fn, P, 256)

    counts = rng.integers(10, 40, 5000).astype(np.int64)
    print("minimal_windows, 5000 timesteps")
    for name, fn in impls("window_ends"):
        bench(name, fn, counts, 1024)


if __name__ == "__main__":
    main()
