"""Compare the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Each kernel is compiled once before timing; the reported figure is the best of
``--repeat`` runs.
"""

import argparse
import timeit

import numpy as np

from nashmerge import kernels


def cases(rng):
    G = rng.standard_normal((4096, 16)) - rng.standard_normal(4096)[:, None]
    K = G.T @ G
    a0 = 1 / np.sqrt(np.diag(K))
    a0 *= np.sqrt(16 / (a0 @ K @ a0))
    grid = np.linspace(-1, 1, 201)
    R, U = (a.ravel() for a in np.meshgrid(grid, grid, indexing="ij"))
    buf = rng.standard_normal((1 << 18, 4))
    g = rng.standard_normal(1 << 18)
    beta = np.array([0.8, 0.3, 0.3, 0.3])
    Usamp = rng.standard_normal((10_000, 3)) - 3.0
    u0 = np.zeros(3)
    return {
        "nash_newton (N=16)": (kernels.nash_newton_py, kernels.nash_newton_nb, (K, a0, 1e-10, 20)),
        "stability_sweep (201^2)": (kernels.stability_sweep_py, kernels.stability_sweep_nb, (R, U, 2.0, 0.5)),
        "quat_momentum (d=2^18)": (kernels.quat_momentum_py, kernels.quat_momentum_nb, (beta, buf, g)),
        "first_dominator (1e4 x 3)": (kernels.first_dominator_py, kernels.first_dominator_nb, (Usamp, u0, 1e-9, 1e-6)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None, help="numba thread cap (default: NAMEX_THREADS or all)")
    args = ap.parse_args()
    kernels.configure_threads(args.threads)
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, (py, nb, call_args) in cases(rng).items():
        nb(*call_args)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: nb(*call_args), number=1, repeat=args.repeat))
        print(f"{name:28s} {t_py * 1e3:11.3f} {t_nb * 1e3:11.3f} {t_py / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
