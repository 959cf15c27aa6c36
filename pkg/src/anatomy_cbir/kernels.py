"""Hot numeric kernels: nearest-code assignment and L2 distance scans.

Both come in a numba @njit flavor and a pure-numpy flavor.  Setting the
environment variable ``ANATOMY_CBIR_NO_NUMBA=1`` (before import) selects the
numpy path; otherwise numba is used when it imports cleanly.  The kernels are
value-equivalent up to floating-point summation order; ``benchmarks/
bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("ANATOMY_CBIR_NO_NUMBA", "").strip() not in ("", "0")

try:  # pragma: no cover - exercised implicitly by the flag
    if _DISABLED:
        raise ImportError("numba disabled by ANATOMY_CBIR_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    njit = None
    HAVE_NUMBA = False


def nearest_codes_numpy(flat: np.ndarray, book: np.ndarray):
    """Nearest codebook row per input vector; ties go to the lowest index.

    flat: (N, D), book: (K, D).  Returns (indices (N,) int64, sqdist (N,)).
    """
    n2 = np.einsum("nd,nd->n", flat, flat)
    k2 = np.einsum("kd,kd->k", book, book)
    cross = flat @ book.T
    d2 = n2[:, None] + k2[None, :] - 2.0 * cross
    idx = np.argmin(d2, axis=1)
    diff = flat - book[idx]
    sq = np.einsum("nd,nd->n", diff, diff)
    return idx.astype(np.int64), np.maximum(sq, 0.0)


def pairwise_sq_l2_numpy(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """All-pairs squared L2 distances; queries (Nq, D) x refs (Nr, D) -> (Nq, Nr)."""
    q2 = np.einsum("nd,nd->n", queries, queries)
    r2 = np.einsum("nd,nd->n", refs, refs)
    d2 = q2[:, None] + r2[None, :] - 2.0 * (queries @ refs.T)
    return np.maximum(d2, 0.0)


def sq_l2_to_refs_numpy(query: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Squared L2 distance from one query (D,) to every row of refs (N, D)."""
    diff = refs - query[None, :]
    return np.einsum("nd,nd->n", diff, diff)


if HAVE_NUMBA:

    @njit(cache=True)
    def _nearest_codes_jit(flat, book):
        n, d = flat.shape
        k = book.shape[0]
        idx = np.empty(n, dtype=np.int64)
        sq = np.empty(n, dtype=flat.dtype)
        for i in range(n):
            best = np.inf
            best_j = 0
            for j in range(k):
                acc = 0.0
                for c in range(d):
                    t = flat[i, c] - book[j, c]
                    acc += t * t
                if acc < best:  # strict < keeps the lowest index on ties
                    best = acc
                    best_j = j
            idx[i] = best_j
            sq[i] = best
        return idx, sq

    @njit(cache=True)
    def _pairwise_sq_l2_jit(queries, refs):
        nq, d = queries.shape
        nr = refs.shape[0]
        out = np.empty((nq, nr), dtype=queries.dtype)
        for i in range(nq):
            for j in range(nr):
                acc = 0.0
                for c in range(d):
                    t = queries[i, c] - refs[j, c]
                    acc += t * t
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _sq_l2_to_refs_jit(query, refs):
        n, d = refs.shape
        out = np.empty(n, dtype=refs.dtype)
        for j in range(n):
            acc = 0.0
            for c in range(d):
                t = query[c] - refs[j, c]
                acc += t * t
            out[j] = acc
        return out

    def nearest_codes_numba(flat, book):
        flat = np.ascontiguousarray(flat)
        book = np.ascontiguousarray(book, dtype=flat.dtype)
        return _nearest_codes_jit(flat, book)

    def pairwise_sq_l2_numba(queries, refs):
        queries = np.ascontiguousarray(queries)
        refs = np.ascontiguousarray(refs, dtype=queries.dtype)
        return _pairwise_sq_l2_jit(queries, refs)

    def sq_l2_to_refs_numba(query, refs):
        query = np.ascontiguousarray(query)
        refs = np.ascontiguousarray(refs, dtype=query.dtype)
        return _sq_l2_to_refs_jit(query, refs)

    nearest_codes = nearest_codes_numba
    pairwise_sq_l2 = pairwise_sq_l2_numba
    sq_l2_to_refs = sq_l2_to_refs_numba
else:  # pragma: no cover - flag-dependent
    nearest_codes_numba = None
    pairwise_sq_l2_numba = None
    sq_l2_to_refs_numba = None

    nearest_codes = nearest_codes_numpy
    pairwise_sq_l2 = pairwise_sq_l2_numpy
    sq_l2_to_refs = sq_l2_to_refs_numpy
