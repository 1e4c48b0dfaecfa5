"""Benchmark the compiled kernel core against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]

Workloads mirror the pipeline's hot paths: FIR filtering and resampling of
2 s of 16 kHz audio, and probe training steps (fused forward/backward plus
Adam) at a small and a large layer size. Times are the best of N repeats.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from repref._kernels import _numpy_ref
from repref.dsp import _resample_prototype

try:
    from repref._kernels import _core
except ImportError:
    _core = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_workloads():
    rng = np.random.default_rng(0)
    audio = rng.standard_normal(32000)
    taps = np.hamming(255)
    proto = _resample_prototype(1, 3)

    def train_step_workload(dims, batch, steps=50):
        ws = [rng.standard_normal((a, b)).astype(np.float32) * 0.2
              for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b, dtype=np.float32) for b in dims[1:]]
        x = rng.standard_normal((batch, dims[0])).astype(np.float32)
        y = rng.integers(0, dims[-1], batch)

        def run(backend):
            w2 = [w.copy() for w in ws]
            b2 = [b.copy() for b in bs]
            params = w2 + b2
            m = [np.zeros_like(p) for p in params]
            v = [np.zeros_like(p) for p in params]
            for t in range(1, steps + 1):
                _, dw, db = backend.loss_and_grads(w2, b2, x, y, "multiclass")
                backend.adam_step(params, list(dw) + list(db), m, v, t,
                                  1e-3, 0.9, 0.999, 1e-8, 1e-5)
        return run

    return [
        ("fir_convolve 32k x 255",
         lambda b: b.fir_convolve(audio, taps)),
        ("resample 48k->16k (2 s)",
         lambda b: b.polyphase_resample(audio, 1, 3, proto)),
        ("train slp 26->12 (50 steps, B=32)",
         train_step_workload([26, 12], 32)),
        ("train mlp 80->[40]->12 (50 steps, B=32)",
         train_step_workload([80, 40, 12], 32)),
        ("train mlp 512->[256,128]->10 (50 steps, B=32)",
         train_step_workload([512, 256, 128, 10], 32)),
    ]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    header = f"{'workload':<44} {'numpy':>10} {'compiled':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, work in make_workloads():
        t_numpy = best_of(lambda: work(_numpy_ref), args.repeats)
        if _core is None:
            print(f"{name:<44} {t_numpy * 1e3:>8.2f}ms {'n/a':>10} {'':>8}")
            continue
        t_core = best_of(lambda: work(_core), args.repeats)
        print(f"{name:<44} {t_numpy * 1e3:>8.2f}ms {t_core * 1e3:>8.2f}ms "
              f"{t_numpy / t_core:>7.2f}x")
    if _core is None:
        print("\ncompiled core not built; showing the numpy fallback only")


if __name__ == "__main__":
    main()
