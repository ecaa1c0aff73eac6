"""Compare the compiled and pure-numpy hot kernels.

Run ``python benchmarks/bench_kernels.py [--repeat R]``.  The compiled path
is timed after a warm-up call so JIT compilation is excluded; results from the
two paths are checked against each other before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from powertalk import _kernels as K
from powertalk.grid_model import Topology, droop_slope, uniform_params
from powertalk.steady_state import compact_coefficients


def _newton_case(N, T, seed=0):
    rng = np.random.default_rng(seed)
    params = uniform_params(Topology.line(N), 1000.0, 200.0, 200.0, 50.0, 1.0)
    X = 400.0 + rng.uniform(-10, 10, (T, N))
    S = np.full((T, N), droop_slope(400.0, 15.0))
    A, B, C = compact_coefficients(X, S, params)
    Y = params.conductance_matrix()
    V0 = np.full((T, N), 400.0)
    return (A, B, C, Y, V0, 1e-9 * 400.0)


def _block_case(N, T, seed=0):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((T, N, N)) + N * np.eye(N)
    R = rng.standard_normal((T, N, 3 * N))
    return G, R


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba not importable; only the numpy path is available")
    print(f"{'kernel':<14}{'N':>4}{'T':>6}{'numpy ms':>11}{'numba ms':>11}{'speed-up':>10}")
    for N, T in [(2, 600), (6, 600), (6, 2000), (12, 600)]:
        case = _newton_case(N, T)
        ref = K.newton_slots(*case, use_numba=False)
        fn_np = lambda: K.newton_slots(*case, use_numba=False)
        t_np = _best(fn_np, args.repeat)
        if K.HAVE_NUMBA:
            got = K.newton_slots(*case, use_numba=True)
            assert np.allclose(got[0], ref[0], rtol=0, atol=1e-8), "kernel mismatch"
            t_nb = _best(lambda: K.newton_slots(*case, use_numba=True), args.repeat)
        else:
            t_nb = float("nan")
        print(f"{'newton_slots':<14}{N:>4}{T:>6}{1e3 * t_np:>11.2f}{1e3 * t_nb:>11.2f}{t_np / t_nb:>10.1f}")
    for N, T in [(6, 45), (6, 300), (12, 300)]:
        G, R = _block_case(N, T)
        ref = K.block_solve(G, R, use_numba=False)
        t_np = _best(lambda: K.block_solve(G, R, use_numba=False), args.repeat)
        if K.HAVE_NUMBA:
            assert np.allclose(K.block_solve(G, R, use_numba=True), ref, rtol=1e-12, atol=1e-12)
            t_nb = _best(lambda: K.block_solve(G, R, use_numba=True), args.repeat)
        else:
            t_nb = float("nan")
        print(f"{'block_solve':<14}{N:>4}{T:>6}{1e3 * t_np:>11.3f}{1e3 * t_nb:>11.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
