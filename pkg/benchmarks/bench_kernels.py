"""Time every kernel on its numba and pure-numpy path.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is called once before timing so numba compilation is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from adaudit import kernels


def cases(rng):
    samples = np.concatenate([rng.normal(2, 0.3, 2000), rng.normal(8, 0.5, 800)])
    grid = np.linspace(samples.min() - 2, samples.max() + 2, 512)
    density = kernels.kde_grid_numpy(samples, grid, 0.25)
    ts = np.cumsum(rng.exponential(300.0, 200_000))
    y = rng.negative_binomial(2, 0.2, 100_000).astype(np.float64)
    mu = np.full(y.shape, 8.0)
    scores = rng.normal(size=(100_000, 12))
    codes = rng.integers(0, 900, 100_000).astype(np.int64)
    return {
        "kde_grid": (samples, grid, 0.25),
        "first_max_then_min": (density,),
        "session_starts": (ts, 900.0),
        "nb_alpha_sums": (y, mu, 0.5),
        "cluster_sums": (scores, codes, 900),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, a in cases(rng).items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        f_nb(*a)  # compile
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a, args.repeat)
        print(f"{name:<22}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
