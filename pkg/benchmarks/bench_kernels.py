"""Timing comparison of the numba and numpy kernel backends.

Run with ``python3 benchmarks/bench_kernels.py [--repeats N]``. Workload
sizes roughly track a V=2562 icosphere pyramid processing 64-frame clips.
Set SPIRALDIFF_NO_NUMBA=1 to confirm the numpy fallback is the one left.
"""

import argparse
import time

import numpy as np

from spiraldiff import kernels
from spiraldiff.rng import named_rng


def make_workloads(rng):
    v, rows, k, c = 2562, 1281, 9, 64 * 3
    feats = rng.standard_normal((v, c))
    table = rng.integers(0, v + 1, size=(rows, k)).astype(np.int64)
    grad = rng.standard_normal((rows, k * c))

    # pooling matrix: each coarse row mixes 3 fine vertices
    deg = np.full(rows, 3)
    indptr = np.concatenate([[0], np.cumsum(deg)]).astype(np.int64)
    indices = rng.integers(0, v, size=indptr[-1]).astype(np.int64)
    weights = rng.random(indptr[-1])
    weights[indptr[:-1]] = 1.0 - (weights[indptr[:-1] + 1] + weights[indptr[:-1] + 2])
    pooled_grad = rng.standard_normal((rows, c))

    queries = rng.standard_normal((30 * 64, 64))
    codebook = rng.standard_normal((256, 64))

    return {
        "spiral_gather": (feats, table, v),
        "spiral_scatter": (np.ascontiguousarray(grad), table, v, v),
        "nearest_codes": (np.ascontiguousarray(queries), np.ascontiguousarray(codebook)),
        "csr_matvec": (indptr, indices, weights, feats),
        "csr_matvec_adjoint": (indptr, indices, weights, pooled_grad, v),
        "csr_anchored_mix": (indptr, indices, weights, feats),
    }


def bench(fn, args, repeats):
    fn(*args)  # warm-up (jit compile on the numba path)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    rng = named_rng(0, "bench/kernels")
    workloads = make_workloads(rng)
    backends = kernels.backends()

    names = sorted(workloads)
    cols = sorted(backends)
    print(f"active backend: {kernels.BACKEND}")
    header = ["kernel"] + [f"{c} (ms)" for c in cols] + (
        ["speedup"] if len(cols) == 2 else [])
    print("  ".join(h.ljust(20) for h in header).rstrip())
    for name in names:
        row = [name.ljust(20)]
        times = {}
        for col in cols:
            times[col] = bench(backends[col][name], workloads[name], args.repeats)
            row.append(f"{times[col] * 1e3:10.3f}".ljust(20))
        if len(cols) == 2:
            row.append(f"{times['numpy'] / times['numba']:8.2f}x")
        print("  ".join(row).rstrip())


if __name__ == "__main__":
    main()
