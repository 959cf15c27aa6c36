"""Throughput comparison of the numba and numpy kernel flavors.

Run as a script::

    python benchmarks/bench_kernels.py [--repeats 5]

Each kernel is timed on retrieval-scale shapes (4096-dim flattened codes,
512-row codebooks).  The numba path is skipped, with a note, when numba is
unavailable or disabled via ``ANATOMY_CBIR_NO_NUMBA=1``.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from anatomy_cbir import kernels

CASES = [
    ("nearest_codes  N=64    K=512 D=64",
     lambda rng: (rng.standard_normal((64, 64)), rng.standard_normal((512, 64)))),
    ("nearest_codes  N=1024  K=512 D=64",
     lambda rng: (rng.standard_normal((1024, 64)), rng.standard_normal((512, 64)))),
    ("pairwise_sq_l2 Nq=200  Nr=200 D=4096",
     lambda rng: (rng.standard_normal((200, 4096)), rng.standard_normal((200, 4096)))),
    ("sq_l2_to_refs  Nr=2000 D=4096",
     lambda rng: (rng.standard_normal(4096), rng.standard_normal((2000, 4096)))),
]

FLAVORS = {
    "nearest_codes": (kernels.nearest_codes_numpy, kernels.nearest_codes_numba),
    "pairwise_sq_l2": (kernels.pairwise_sq_l2_numpy, kernels.pairwise_sq_l2_numba),
    "sq_l2_to_refs": (kernels.sq_l2_to_refs_numpy, kernels.sq_l2_to_refs_numba),
}


def best_of(fn, args, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case; the best is reported")
    parser.add_argument("--seed", type=int, default=0)
    opts = parser.parse_args()

    rng = np.random.default_rng(opts.seed)
    if not kernels.HAVE_NUMBA:
        print("note: numba unavailable or disabled; timing the numpy path only")
    print(f"{'case':44s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for label, make in CASES:
        args = make(rng)
        name = label.split()[0]
        numpy_fn, numba_fn = FLAVORS[name]
        t_np = best_of(numpy_fn, args, opts.repeats)
        if kernels.HAVE_NUMBA and numba_fn is not None:
            numba_fn(*args)  # trigger the JIT compile outside the timer
            t_nb = best_of(numba_fn, args, opts.repeats)
            print(f"{label:44s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms "
                  f"{t_np / t_nb:7.2f}x")
        else:
            print(f"{label:44s} {t_np * 1e3:9.2f}ms {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
