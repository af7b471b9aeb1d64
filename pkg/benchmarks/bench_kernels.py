"""Compare the numba kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py [--repeat 50]
The same sizes the training loop hits: ~500 agent-steps per batch with up to
eight attention rows each, 100-step reward traces, million-parameter Adam.
"""

import argparse
import time

import numpy as np

from formation_lab.kernels import numba_impl, numpy_impl


def timeit(fn, repeat):
    fn()  # warm up (jit compile / page in)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def make_cases(rng):
    B, H, D = 500, 4, 128
    counts = rng.integers(1, 9, size=B)
    offsets = np.zeros(B + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    R = int(offsets[-1])
    q = rng.normal(size=(B, H, D))
    k = rng.normal(size=(R, H, D))
    v = rng.normal(size=(R, H, D))
    d_out = rng.normal(size=(B, H, D))
    _, weights = numpy_impl.attention_forward(q, k, v, offsets, 0.1)

    a = rng.normal(size=(8, 2))
    b = rng.normal(size=(8, 2))
    pos = rng.normal(size=(8, 2))
    active = np.ones(8, dtype=bool)
    rewards = rng.normal(size=100)
    values = rng.normal(size=101)
    p = rng.normal(size=1_300_000)
    g = rng.normal(size=1_300_000)
    m = np.zeros_like(p)
    vv = np.zeros_like(p)

    return {
        "directed_hausdorff (8x8)": lambda impl: impl.directed_hausdorff(a, b),
        "collision_count (8)": lambda impl: impl.collision_count(pos, active, 0.15),
        "gae_advantages (T=100)": lambda impl: impl.gae_advantages(
            rewards, values, 0.8, 0.95
        ),
        "attention_forward (B=500)": lambda impl: impl.attention_forward(
            q, k, v, offsets, 0.1
        ),
        "attention_backward (B=500)": lambda impl: impl.attention_backward(
            d_out, q, k, v, offsets, weights, 0.1
        ),
        "adam_update (1.3M)": lambda impl: impl.adam_update(
            p, g, m, vv, 3, 1e-4, 0.9, 0.999, 1e-8
        ),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()
    cases = make_cases(np.random.default_rng(0))
    print(f"{'kernel':<30s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for name, fn in cases.items():
        t_np = timeit(lambda: fn(numpy_impl), args.repeat)
        t_nb = timeit(lambda: fn(numba_impl), args.repeat)
        print(f"{name:<30s} {t_np * 1e6:>8.1f}us {t_nb * 1e6:>8.1f}us "
              f"{t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
