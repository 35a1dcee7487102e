"""Compare the compiled and numpy loss/gradient kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times one fused forward/backward call per backend for a few model and
batch shapes, and reports a full 20-round training run per backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedadc import kernels, nn

SHAPES = [
    ("logistic 32-10, batch 16", (32, 10), 16),
    ("mlp 32-64-10, batch 16", (32, 64, 10), 16),
    ("mlp 32-64-10, batch 64", (32, 64, 10), 64),
    ("mlp 128-256-128-10, batch 64", (128, 256, 128, 10), 64),
]

RUN_SNIPPET = """
import time
from fedadc.config import ExperimentConfig
from fedadc.engine import run_experiment
t = time.perf_counter()
run_experiment(ExperimentConfig(rounds=20, loss="combined"))
print(time.perf_counter() - t)
"""


def bench_kernel(mod, dims, batch, combined, repeat):
    rng = np.random.default_rng(0)
    n_params = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    params = rng.normal(scale=0.1, size=n_params)
    x = rng.normal(size=(batch, dims[0]))
    y = rng.integers(0, dims[-1], size=batch)
    targets = rng.dirichlet(np.ones(dims[-1]), size=batch) if combined else None
    lam = 0.35 if combined else 0.0
    call = lambda: mod.loss_grad(dims, "relu", params, x, y, targets, lam, 1.0, 0.0)
    number = max(1, 2000 // max(1, n_params // 1000))
    best = min(timeit.repeat(call, number=number, repeat=repeat)) / number
    return best * 1e6


def bench_run(backend):
    env = dict(os.environ, FEDADC_KERNEL=backend)
    out = subprocess.run([sys.executable, "-c", RUN_SNIPPET], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernel not built; only the numpy backend is available")
    names = sorted(backends)
    print(f"{'shape':34s} {'loss':8s} " + " ".join(f"{n + ' us':>12s}" for n in names) + "  speedup")
    for label, dims, batch in SHAPES:
        for combined in (False, True):
            times = {n: bench_kernel(backends[n], dims, batch, combined, args.repeat) for n in names}
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            cells = " ".join(f"{times[n]:12.1f}" for n in names)
            print(f"{label:34s} {'ce+kd' if combined else 'ce':8s} {cells}  {speed:6.2f}x")
    print()
    for n in names:
        print(f"20-round run, default config, {n:6s}: {bench_run(n):.2f} s")


if __name__ == "__main__":
    main()
