#!/usr/bin/env python3
"""Benchmark the compiled kernel extension against the pure-Python fallback.

Times the individual hot kernels head-to-head (both modules are imported
directly, so no environment juggling is needed), then times one small
DNN training run per backend in subprocesses, since backend selection
happens at import.

Run from the repository root after `pip install -e .`:

    python benchmarks/bench_kernels.py
"""

import os
import subprocess
import sys
import time
from array import array
from random import Random

try:
    from fedcast import _ckernels
except ImportError:
    _ckernels = None
from fedcast import _pykernels


def _rand_buf(rng, n):
    return array("d", [rng.uniform(-1, 1) for _ in range(n)])


def time_kernel(fn, args, min_seconds=0.2):
    # one warm-up call, then as many timed repetitions as fit the budget
    fn(*args)
    reps = 0
    t0 = time.perf_counter()
    while True:
        fn(*args)
        reps += 1
        elapsed = time.perf_counter() - t0
        if elapsed >= min_seconds and reps >= 3:
            return elapsed / reps


def bench_kernels():
    rng = Random(0)
    m = k = n = 96
    a = _rand_buf(rng, m * k)
    b = _rand_buf(rng, k * n)
    out = array("d", bytes(8 * m * n))
    big = _rand_buf(rng, 100_000)
    big2 = _rand_buf(rng, 100_000)
    big_out = array("d", bytes(8 * 100_000))
    soft_in = _rand_buf(rng, 256 * 64)
    soft_out = array("d", bytes(8 * 256 * 64))

    cases = [
        ("matmul 96x96x96", "matmul", (a, b, out, m, k, n)),
        ("mul 100k", "mul", (big, big2, big_out, 100_000)),
        ("sigmoid 100k", "sigmoid", (big, big_out, 100_000)),
        ("softmax 256x64", "softmax_rows", (soft_in, soft_out, 256, 64)),
        ("sgd 100k", "sgd_update", (big, big2, big_out, 0.01, 0.9, 100_000)),
    ]

    print(f"{'kernel':<18}{'python':>12}{'compiled':>12}{'speedup':>10}",
          flush=True)
    for label, name, args in cases:
        t_py = time_kernel(getattr(_pykernels, name), args)
        if _ckernels is None:
            print(f"{label:<18}{t_py * 1e3:>10.3f}ms{'n/a':>12}{'n/a':>10}")
            continue
        t_c = time_kernel(getattr(_ckernels, name), args)
        print(f"{label:<18}{t_py * 1e3:>10.3f}ms{t_c * 1e3:>10.3f}ms"
              f"{t_py / t_c:>9.1f}x", flush=True)


_TRAIN_SNIPPET = """
import time
from fedcast import *
from fedcast.backend import BACKEND
schema = BUILTIN_SCHEMAS["animal_feed"]
tables = generate_synthetic(schema, SyntheticConfig(seed=3, records_per_node=200))
nodes = build_node_datasets(schema, tables[:2], window_len=8, ratios=(0.8, 0.2), seed=1)
spec = ModelSpec("dnn", input_dim=len(schema.feature_names), window_len=8,
                 hidden_dims=(16, 8))
params = init_params(spec, 0)
t0 = time.perf_counter()
train_epochs(params, nodes[0].train_data(), epochs=3, lr=0.05, batch_size=32, seed=7)
print(f"  {BACKEND:>8}: {time.perf_counter() - t0:.3f}s for 3 DNN epochs")
"""


def bench_training():
    print("\nend-to-end DNN training (subprocess per backend):", flush=True)
    for backend in ("python", "compiled"):
        if backend == "compiled" and _ckernels is None:
            print("  compiled: extension not built")
            continue
        env = dict(os.environ, FEDCAST_BACKEND=backend)
        subprocess.run([sys.executable, "-c", _TRAIN_SNIPPET], env=env, check=True)


if __name__ == "__main__":
    if _ckernels is None:
        print("note: compiled extension missing; showing fallback only\n")
    bench_kernels()
    bench_training()
