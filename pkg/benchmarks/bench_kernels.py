"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeats 5]

Times the sequential scan and the fused 4-bit matmul on a few shapes and
prints a table of best-of-N milliseconds per call and the speedup.
"""

import argparse
import time

import numpy as np

from llamba import kernels
from llamba.quant import quantize


def best_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def scan_case(batch, T, H, P, N, dtype, rng):
    a = rng.uniform(0.5, 1.0, (batch, T, H)).astype(dtype)
    B = rng.standard_normal((batch, T, H, N)).astype(dtype)
    C = rng.standard_normal((batch, T, H, N)).astype(dtype)
    X = rng.standard_normal((batch, T, H, P)).astype(dtype)
    D = rng.standard_normal(H).astype(dtype)
    S = np.zeros((batch, H, N, P), dtype=dtype)

    def run(backend):
        return lambda: kernels.ssm_scan(a, B, C, X, D, S.copy(), backend=backend)
    return f"scan b={batch} T={T} H={H} P={P} N={N} {np.dtype(dtype).name}", run


def q4_case(m, k, rows, rng):
    q = quantize(rng.standard_normal((m, k)))
    X = rng.standard_normal((rows, k)).astype(np.float32)

    def run(backend):
        return lambda: kernels.q4_matmul(q.packed, q.scales, q.zeros, m, k, q.group_size, X,
                                         backend=backend)
    return f"q4 matmul {m}x{k} rows={rows}", run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the python backend is available")
    rng = np.random.default_rng(0)
    cases = [
        scan_case(1, 1, 2, 16, 64, np.float32, rng),
        scan_case(32, 1, 2, 16, 64, np.float32, rng),
        scan_case(1, 1024, 2, 16, 64, np.float64, rng),
        scan_case(8, 256, 4, 32, 16, np.float32, rng),
        q4_case(256, 256, 1, rng),
        q4_case(1024, 1024, 8, rng),
    ]
    print(f"{'case':<42}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, run in cases:
        ms = [best_ms(run(b), args.repeats) for b in backends]
        line = f"{name:<42}" + "".join(f"{t:>10.3f}ms" for t in ms)
        if len(ms) > 1:
            line += f"{ms[0] / ms[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
