#!/usr/bin/env python3
"""Compare the numba-jit GF(256) kernels against the pure-numpy fallback.

Runs each kernel over realistic slice and block shapes in both backends by
re-importing the kernel module under each ECREPAIR_KERNELS setting, and
prints a throughput table.  Usage: python benchmarks/bench_kernels.py
"""

import importlib
import os
import sys
import time

import numpy as np

SLICE = 32 * 2**10
BLOCK = 8 * 2**20
REPEATS = 200


def load_backend(name: str):
    os.environ["ECREPAIR_KERNELS"] = name
    for module in list(sys.modules):
        if module.startswith("ecrepair"):
            del sys.modules[module]
    kernels = importlib.import_module("ecrepair.kernels")
    assert kernels.BACKEND == name, f"wanted {name}, got {kernels.BACKEND}"
    return kernels


def time_call(fn, *args, repeats=REPEATS):
    fn(*args)  # warm (jit compile, cache touch)
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def bench_backend(name: str):
    kernels = load_backend(name)
    rng = np.random.default_rng(1)
    acc = rng.integers(0, 256, SLICE, dtype=np.uint8)
    src = rng.integers(0, 256, SLICE, dtype=np.uint8)
    out = np.empty_like(src)
    rows = []

    per = time_call(kernels.xor_mul_into, acc, 0x53, src)
    rows.append(("xor_mul_into 32KiB slice", SLICE / per))

    per = time_call(kernels.mul_into, out, 0x53, src)
    rows.append(("mul_into 32KiB slice", SLICE / per))

    k, f = 10, 4
    blocks = rng.integers(0, 256, (k, BLOCK // k), dtype=np.uint8)
    coefs = rng.integers(1, 256, (f, k), dtype=np.uint8)
    target = np.empty((f, BLOCK // k), dtype=np.uint8)
    per = time_call(kernels.matrix_apply, target, coefs, blocks, repeats=20)
    rows.append((f"matrix_apply {f}x{k} on {BLOCK // k // 1024}KiB blocks", f * BLOCK / per))
    return rows


def main():
    results = {}
    for backend in ("numpy", "numba"):
        try:
            results[backend] = bench_backend(backend)
        except ImportError as exc:
            print(f"{backend}: unavailable ({exc})")
    width = max(len(name) for rows in results.values() for name, _ in rows)
    print(f"{'kernel':<{width}}  " + "  ".join(f"{b:>12}" for b in results))
    for i, (name, _) in enumerate(next(iter(results.values()))):
        cells = [f"{results[b][i][1] / 2**30:>9.2f} GiB/s" for b in results]
        print(f"{name:<{width}}  " + "  ".join(cells))
    if len(results) == 2:
        speedups = [
            results["numba"][i][1] / results["numpy"][i][1] for i in range(len(results["numba"]))
        ]
        print(f"numba speedup: {min(speedups):.1f}x .. {max(speedups):.1f}x")


if __name__ == "__main__":
    main()
