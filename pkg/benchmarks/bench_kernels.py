"""Time the numba and numpy backends of the Monte Carlo kernels.

Usage::

    python3 benchmarks/bench_kernels.py [--repeats 5] [--shots 200000]
"""

import argparse
import time

import numpy as np

from ndscc import kernels
from ndscc.simulator import NVParams, kmc_rates

NV = NVParams(3.6e5, 2.4e6, 3.6e5, 2.4e6, 1.7e5, 4.3, 0.75, 0.375)


def _best_of(fn, repeats):
    fn()  # warm-up (includes numba compilation or cache load)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_scc(shots, n_nv, repeats):
    rng = np.random.default_rng(0)
    u = rng.random((shots, n_nv, kernels.SCC_UNIFORMS))
    p_pre = rng.uniform(0.3, 0.9, n_nv)
    a_minus, a_zero = rng.uniform(1, 5, n_nv), rng.uniform(0, 1, n_nv)
    out = {}
    for backend in ("numba", "numpy"):
        out[backend] = _best_of(lambda: kernels.scc_probe_means(
            u, p_pre, 0.5, 0.1, 0.6, 0.15, 0.9, a_minus, a_zero, backend=backend), repeats)
    return out


def bench_kmc(n_traj, power, duration, repeats):
    rates = kmc_rates(NV, power)
    total = rates["k_rad_det"] + rates["k_rad_undet"] + rates["k_lin_ion"] + rates["k_quad_ion"]
    n_events = int(total * duration * 1.2) + 64
    rng = np.random.default_rng(1)
    u = rng.random((n_traj, n_events, 2))
    init = rng.random(n_traj) < 0.7
    out = {}
    for backend in ("numba", "numpy"):
        out[backend] = _best_of(lambda: kernels.kmc_charge(
            u, init, duration=duration, n_bins=100, backend=backend, **rates), repeats)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--shots", type=int, default=200_000)
    ap.add_argument("--nv", type=int, default=12)
    ap.add_argument("--traj", type=int, default=200)
    args = ap.parse_args()
    rows = [("scc_probe_means", f"{args.shots} shots x {args.nv} NVs",
             bench_scc(args.shots, args.nv, args.repeats)),
            ("kmc_charge", f"{args.traj} trajectories, 0.02 mW, 1 ms",
             bench_kmc(args.traj, 0.02, 1e-3, args.repeats))]
    print(f"{'kernel':<16} {'workload':<34} {'numba s':>9} {'numpy s':>9} {'speedup':>8}")
    for name, load, t in rows:
        print(f"{name:<16} {load:<34} {t['numba']:9.4f} {t['numpy']:9.4f} {t['numpy'] / t['numba']:8.1f}")


if __name__ == "__main__":
    main()
