"""Benchmark the LSTM sequence kernels: JIT-compiled vs pure numpy.

Runs both implementations in one process on the same inputs, so the numbers
are directly comparable. The JIT path is what SEVAE_BACKEND=auto selects
when numba is installed; the numpy path is the fallback.

Usage: python3 benchmarks/bench_kernels.py [--reps 30]
"""

import argparse
import statistics
import time

import numpy as np

from sevae import kernels


def _time(fn, reps):
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_case(T, H, reps, rng):
    xw = rng.standard_normal((T, 4 * H))
    whT = rng.standard_normal((4 * H, H)) * 0.1
    h0 = rng.standard_normal(H)
    c0 = rng.standard_normal(H)
    hs, cs, gates = kernels.lstm_forward_py(xw, whT, h0, c0)
    dhs = rng.standard_normal((T, H))

    rows = []
    for label, fwd, bwd in (
        ("numpy", kernels.lstm_forward_py, kernels.lstm_backward_py),
        (kernels.BACKEND, kernels.lstm_forward, kernels.lstm_backward),
    ):
        fwd(xw, whT, h0, c0)  # warm cache / trigger JIT outside the timer
        bwd(dhs, gates, cs, whT, c0)
        t_fwd = _time(lambda: fwd(xw, whT, h0, c0), reps)
        t_bwd = _time(lambda: bwd(dhs, gates, cs, whT, c0), reps)
        rows.append((label, t_fwd, t_bwd))

    j_hs, j_cs, j_gates = kernels.lstm_forward(xw, whT, h0, c0)
    agree = max(
        float(np.max(np.abs(j_hs - hs))),
        float(np.max(np.abs(j_cs - cs))),
        float(np.max(np.abs(j_gates - gates))),
    )
    return rows, agree


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'case':>14s} {'impl':>6s} {'forward':>10s} {'backward':>10s} {'speedup':>8s}")
    for T, H in ((20, 100), (60, 100), (60, 300), (200, 300)):
        rows, agree = bench_case(T, H, args.reps, rng)
        base_fwd, base_bwd = rows[0][1], rows[0][2]
        for label, t_fwd, t_bwd in rows:
            speed = (base_fwd + base_bwd) / (t_fwd + t_bwd)
            print(f"{f'T={T} H={H}':>14s} {label:>6s} {t_fwd * 1e3:9.3f}ms {t_bwd * 1e3:9.3f}ms {speed:7.2f}x")
        print(f"{'':>14s} max |numpy - {kernels.BACKEND}| on outputs: {agree:.2e}")


if __name__ == "__main__":
    main()
