"""Hot numeric kernels: numba-jitted implementations with pure-numpy fallbacks.

The active backend is chosen once at import time. Set ``SPIRALDIFF_NO_NUMBA=1``
(or numba's own ``NUMBA_DISABLE_JIT=1``) to force the numpy path; otherwise the
numba path is used whenever numba imports cleanly. ``benchmarks/bench_kernels.py``
times the two paths against each other.

Kernels are pure functions of their array arguments and hold no state, so they
are safe to call concurrently. Accumulation order is fixed (sequential over
entries), keeping results deterministic run to run.
"""

from __future__ import annotations

import os

import numpy as np


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "") not in ("", "0")


_FORCE_NUMPY = _env_flag("SPIRALDIFF_NO_NUMBA") or _env_flag("NUMBA_DISABLE_JIT")

try:
    if _FORCE_NUMPY:
        raise ImportError("numba disabled by environment flag")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def spiral_gather_numpy(feats, table, sentinel):
    """Gather spiral neighborhoods: (V_rows, K) index table over (V, C) features.

    Returns (V_rows, K*C); slots equal to ``sentinel`` read as zero features.
    """
    n, c = feats.shape
    padded = np.concatenate([feats, np.zeros((1, c), dtype=feats.dtype)], axis=0)
    safe = np.where(table == sentinel, n, table)
    return padded[safe].reshape(table.shape[0], table.shape[1] * c)


def spiral_scatter_numpy(grad, table, sentinel, n_vertices):
    """Adjoint of spiral_gather: scatter-add (V_rows, K*C) back to (n_vertices, C)."""
    rows, kc = grad.shape
    k = table.shape[1]
    c = kc // k
    out = np.zeros((n_vertices + 1, c), dtype=grad.dtype)
    safe = np.where(table == sentinel, n_vertices, table)
    np.add.at(out, safe.ravel(), grad.reshape(rows * k, c))
    return out[:n_vertices]


def nearest_codes_numpy(z, codebook):
    """Index of the nearest codebook row per query (squared L2, lowest-index ties)."""
    m = z.shape[0]
    out = np.empty(m, dtype=np.int64)
    block = 1024
    for start in range(0, m, block):
        stop = min(start + block, m)
        diff = z[start:stop, None, :] - codebook[None, :, :]
        d2 = np.einsum("mkc,mkc->mk", diff, diff)
        out[start:stop] = np.argmin(d2, axis=1)
    return out


def csr_matvec_numpy(indptr, indices, weights, x):
    """Row-weighted gather-sum: out[r] = sum_j weights[j] * x[indices[j]] over row r."""
    contrib = weights[:, None] * x[indices]
    return np.add.reduceat(contrib, indptr[:-1], axis=0)


def csr_matvec_adjoint_numpy(indptr, indices, weights, g, n_cols):
    """Adjoint of csr_matvec: scatter g back onto the fine vertices."""
    n_rows = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    out = np.zeros((n_cols, g.shape[1]), dtype=g.dtype)
    np.add.at(out, indices, weights[:, None] * g[rows])
    return out


def csr_anchored_mix_numpy(indptr, indices, weights, x):
    """Same linear map as csr_matvec when each row's first weight equals
    1 - sum(rest), evaluated as anchor + sum w_k (x[k] - anchor) so constant
    fields pass through bit-exactly."""
    n_rows = indptr.shape[0] - 1
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    base = x[indices[indptr[:-1]]]
    contrib = weights[:, None] * (x[indices] - base[rows])
    return base + np.add.reduceat(contrib, indptr[:-1], axis=0)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _spiral_gather_nb(feats, table, sentinel):
        n, c = feats.shape
        rows, k = table.shape
        out = np.zeros((rows, k * c), dtype=feats.dtype)
        for v in range(rows):
            for s in range(k):
                j = table[v, s]
                if j != sentinel:
                    base = s * c
                    for ch in range(c):
                        out[v, base + ch] = feats[j, ch]
        return out

    @njit(cache=True)
    def _spiral_scatter_nb(grad, table, sentinel, n_vertices):
        rows, kc = grad.shape
        k = table.shape[1]
        c = kc // k
        out = np.zeros((n_vertices, c), dtype=grad.dtype)
        for v in range(rows):
            for s in range(k):
                j = table[v, s]
                if j != sentinel:
                    base = s * c
                    for ch in range(c):
                        out[j, ch] += grad[v, base + ch]
        return out

    @njit(cache=True)
    def _nearest_codes_nb(z, codebook):
        m, c = z.shape
        k = codebook.shape[0]
        out = np.empty(m, dtype=np.int64)
        for i in range(m):
            best = 0
            best_d = np.inf
            for j in range(k):
                d = 0.0
                for ch in range(c):
                    t = z[i, ch] - codebook[j, ch]
                    d += t * t
                if d < best_d:
                    best_d = d
                    best = j
            out[i] = best
        return out

    @njit(cache=True)
    def _csr_matvec_nb(indptr, indices, weights, x):
        n_rows = indptr.shape[0] - 1
        c = x.shape[1]
        out = np.zeros((n_rows, c), dtype=x.dtype)
        for r in range(n_rows):
            for j in range(indptr[r], indptr[r + 1]):
                w = weights[j]
                src = indices[j]
                for ch in range(c):
                    out[r, ch] += w * x[src, ch]
        return out

    @njit(cache=True)
    def _csr_matvec_adjoint_nb(indptr, indices, weights, g, n_cols):
        n_rows = indptr.shape[0] - 1
        c = g.shape[1]
        out = np.zeros((n_cols, c), dtype=g.dtype)
        for r in range(n_rows):
            for j in range(indptr[r], indptr[r + 1]):
                w = weights[j]
                dst = indices[j]
                for ch in range(c):
                    out[dst, ch] += w * g[r, ch]
        return out

    @njit(cache=True)
    def _csr_anchored_mix_nb(indptr, indices, weights, x):
        n_rows = indptr.shape[0] - 1
        c = x.shape[1]
        out = np.empty((n_rows, c), dtype=x.dtype)
        for r in range(n_rows):
            anchor = indices[indptr[r]]
            for ch in range(c):
                base = x[anchor, ch]
                acc = 0.0
                for j in range(indptr[r], indptr[r + 1]):
                    acc += weights[j] * (x[indices[j], ch] - base)
                out[r, ch] = base + acc
        return out

    def spiral_gather_numba(feats, table, sentinel):
        return _spiral_gather_nb(feats, table, np.int64(sentinel))

    def spiral_scatter_numba(grad, table, sentinel, n_vertices):
        return _spiral_scatter_nb(grad, table, np.int64(sentinel), n_vertices)

    def nearest_codes_numba(z, codebook):
        return _nearest_codes_nb(np.ascontiguousarray(z), np.ascontiguousarray(codebook))

    def csr_matvec_numba(indptr, indices, weights, x):
        return _csr_matvec_nb(indptr, indices, weights, np.ascontiguousarray(x))

    def csr_matvec_adjoint_numba(indptr, indices, weights, g, n_cols):
        return _csr_matvec_adjoint_nb(indptr, indices, weights, np.ascontiguousarray(g), n_cols)

    def csr_anchored_mix_numba(indptr, indices, weights, x):
        return _csr_anchored_mix_nb(indptr, indices, weights, np.ascontiguousarray(x))


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_NUMPY_BACKEND = {
    "spiral_gather": spiral_gather_numpy,
    "spiral_scatter": spiral_scatter_numpy,
    "nearest_codes": nearest_codes_numpy,
    "csr_matvec": csr_matvec_numpy,
    "csr_matvec_adjoint": csr_matvec_adjoint_numpy,
    "csr_anchored_mix": csr_anchored_mix_numpy,
}

if HAVE_NUMBA:
    _NUMBA_BACKEND = {
        "spiral_gather": spiral_gather_numba,
        "spiral_scatter": spiral_scatter_numba,
        "nearest_codes": nearest_codes_numba,
        "csr_matvec": csr_matvec_numba,
        "csr_matvec_adjoint": csr_matvec_adjoint_numba,
        "csr_anchored_mix": csr_anchored_mix_numba,
    }
    BACKEND = "numba"
    _ACTIVE = _NUMBA_BACKEND
else:
    BACKEND = "numpy"
    _ACTIVE = _NUMPY_BACKEND

spiral_gather = _ACTIVE["spiral_gather"]
spiral_scatter = _ACTIVE["spiral_scatter"]
nearest_codes = _ACTIVE["nearest_codes"]
csr_matvec = _ACTIVE["csr_matvec"]
csr_matvec_adjoint = _ACTIVE["csr_matvec_adjoint"]
csr_anchored_mix = _ACTIVE["csr_anchored_mix"]


def backends():
    """All importable backends keyed by name (for parity tests and benchmarks)."""
    out = {"numpy": _NUMPY_BACKEND}
    if HAVE_NUMBA:
        out["numba"] = _NUMBA_BACKEND
    return out
