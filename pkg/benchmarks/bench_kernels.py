"""Compare the compiled flux kernel with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--solve]

Prints per-shape timings of ``flux_contract`` for both backends and their
maximum relative difference.  ``--solve`` also times a full p = 4 Newton
solve with each backend.
"""

import argparse
import time

import numpy as np

from dsgd import _kernels_py, kernels, schemes

try:
    from dsgd import _kernels
except ImportError:  # extension not built
    _kernels = None

SHAPES = [  # (elements, points, dim, local dofs)
    (500, 40, 2, 12),
    (500, 40, 2, 30),
    (2000, 60, 2, 30),
    (500, 120, 2, 60),
    (1000, 20, 1, 30),
]


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernel(repeat, p=4.0, eps=1e-6):
    rng = np.random.default_rng(0)
    print(f"{'shape':>22} {'numpy [ms]':>11} {'cython [ms]':>12} {'speedup':>8} {'max rel diff':>13}")
    for shape in SHAPES:
        nE, nq, dim, nT = shape
        B = rng.normal(size=shape)
        W = rng.uniform(0.1, 1.0, size=(nE, nq))
        U = rng.normal(size=(nE, nT))
        t_py = _best(lambda: _kernels_py.flux_contract(B, W, U, p, eps, True), repeat)
        if _kernels is None:
            print(f"{str(shape):>22} {1e3 * t_py:11.2f} {'n/a':>12}")
            continue
        t_cy = _best(lambda: _kernels.flux_contract(B, W, U, p, eps, True), repeat)
        r1, j1 = _kernels_py.flux_contract(B, W, U, p, eps, True)
        r2, j2 = _kernels.flux_contract(B, W, U, p, eps, True)
        diff = max(np.abs(r1 - r2).max() / np.abs(r1).max(), np.abs(j1 - j2).max() / np.abs(j1).max())
        print(f"{str(shape):>22} {1e3 * t_py:11.2f} {1e3 * t_cy:12.2f} {t_py / t_cy:8.1f} {diff:13.2e}")


def bench_solve(family="triangular", n=3, k=1, p=4.0):
    from dsgd import cases
    from dsgd.core import Discretization, SpaceSpec
    from dsgd.mesh import MeshFamilySpec, generate

    disc = Discretization(generate(MeshFamilySpec(family, n)), SpaceSpec(k, k))
    problem = schemes.ProblemSpec.from_case(cases.trigonometric(p))
    system = schemes.assemble_plaplace(disc, "rtn", p, problem.f, problem.g)
    backends = [("numpy", _kernels_py.flux_contract)]
    if _kernels is not None:
        backends.append(("cython", _kernels.flux_contract))
    saved = kernels.flux_contract
    try:
        for name, fn in backends:
            kernels.flux_contract = fn
            t0 = time.perf_counter()
            _, rep = schemes.newton_solve(system)
            print(f"Newton p={p:g} {family} n={n} k={k} [{name}]: "
                  f"{time.perf_counter() - t0:.2f} s, {rep.iterations} iterations")
    finally:
        kernels.flux_contract = saved


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--solve", action="store_true")
    args = ap.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    bench_kernel(args.repeat)
    if args.solve:
        bench_solve()


if __name__ == "__main__":
    main()
