"""Time each hot kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call per kernel compiles (or loads from the on-disk cache)
and is excluded from the timing.
"""

import argparse
import math
import timeit

import numpy as np

from tierkv import _kernels


def cases(rng):
    s, d, m = 16384, 128, 2048
    K = rng.standard_normal((s, d)).astype(np.float32)
    V = rng.standard_normal((4096, d)).astype(np.float32)
    inv = (10000.0 ** (-np.arange(d // 2) / (d // 2))).astype(np.float64)
    A = rng.standard_normal((s, 160)).astype(np.float32)
    B = rng.standard_normal((160, d)).astype(np.float32)
    rows = rng.choice(s, 2048, replace=False).astype(np.int64)
    Qg = rng.standard_normal((4, 1, d)).astype(np.float32)
    L = rng.standard_normal((m, d)).astype(np.float32)
    Q = rng.standard_normal((4, d)).astype(np.float32)
    kpos = np.arange(4096, dtype=np.int64)
    qpos = np.full(4, 4095, dtype=np.int64)
    scale = 1.0 / math.sqrt(d)
    return {
        "chunk_cosine": (K, 8),
        "rope": (K, np.arange(s, dtype=np.int64), inv, False),
        "gather_matmul": (A, B, rows),
        "attend": (Q, qpos, V, V, kpos, scale),
        "landmark_scores": (Qg, L, scale),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    args_by_kernel = cases(np.random.default_rng(0))
    backends = sorted(_kernels.BACKENDS)
    print(f"{'kernel':<16}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for name, kargs in args_by_kernel.items():
        times = {}
        for b in backends:
            fn = _kernels.BACKENDS[b][name]
            fn(*kargs)  # warm-up / compile
            times[b] = min(timeit.repeat(lambda: fn(*kargs), number=1, repeat=args.repeat)) * 1e3
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        print(f"{name:<16}" + "".join(f"{times[b]:>14.3f}" for b in backends) + f"{speed:>9.2f}x")


if __name__ == "__main__":
    main()
