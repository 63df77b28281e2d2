"""Time the numba and numpy step kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--paths 50000] [--dim 1] [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from lkentropy._kernels import numba_kernels, numpy_kernels


def inputs(N, n, batched, rng):
    z, F, xi = rng.normal(size=(3, N, n))
    shape = (N, n, n) if batched else (n, n)
    E, Phi, L = rng.normal(size=(3,) + shape) * 0.3
    scale = None if batched else rng.uniform(0.5, 1.5, N)
    ou = (z, E, Phi, F, L, xi, scale)
    vec = rng.normal(size=(5, N))
    mat = rng.normal(size=(4, N, n))
    inc = (mat[0], mat[1], 1e-3, 0.1, vec[0] ** 2 + 0.5, vec[1], mat[2], vec[2], vec[3], mat[3], vec[4][:, None] * mat[0])
    return ou, inc


def bench(kern, ou, inc, repeat):
    kern.ou_update(*ou)
    kern.underdamped_increment(*inc)
    t_ou = min(timeit.repeat(lambda: kern.ou_update(*ou), number=1, repeat=repeat))
    t_inc = min(timeit.repeat(lambda: kern.underdamped_increment(*inc), number=1, repeat=repeat))
    return t_ou, t_inc


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=50000)
    ap.add_argument("--dim", type=int, nargs="*", default=[1, 3])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = [numpy_kernels] + ([numba_kernels] if numba_kernels is not None else [])
    print(f"{'n':>2} {'matrices':>9} {'backend':>7} {'ou_update ms':>13} {'increment ms':>13}")
    for n in args.dim:
        for batched in (False, True):
            ou, inc = inputs(args.paths, n, batched, rng)
            ref = [numpy_kernels.ou_update(*ou), numpy_kernels.underdamped_increment(*inc)]
            for kern in backends:
                got = [kern.ou_update(*ou), kern.underdamped_increment(*inc)]
                assert all(np.allclose(a, b, rtol=1e-12, atol=1e-12) for a, b in zip(got, ref))
                t_ou, t_inc = bench(kern, ou, inc, args.repeat)
                label = "per-path" if batched else "shared"
                print(f"{n:>2} {label:>9} {kern.name:>7} {1e3 * t_ou:13.3f} {1e3 * t_inc:13.3f}")


if __name__ == "__main__":
    main()
