"""Time the fused IMV-Tensor kernels: numba loops vs numpy, forward and backward.

    python benchmarks/bench_kernels.py [--batch 64] [--window 10] [--n-vars 7] [--dim 8] [--repeat 20]

Prints the best-of-``repeat`` wall time per call for each implementation.
Loop kernels run uncompiled when numba is missing or disabled, which is slow
but still correct.
"""
import argparse
import timeit

import numpy as np

from imvlstm import kernels
from imvlstm._accel import HAVE_NUMBA


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--n-vars", type=int, default=7)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    B, T, N, d = args.batch, args.window, args.n_vars, args.dim
    wc = rng.normal(scale=0.3, size=(N, 4 * d, d))
    uc = rng.normal(scale=0.3, size=(N, 4 * d, 1))
    bc = rng.normal(scale=0.1, size=(N, 4 * d))
    xs = kernels.to_feature_major(rng.normal(size=(B, T, N, 1)))
    hs, cs, tcs, acts = kernels.forward_numpy(wc, uc, bc, xs)
    dhs = rng.normal(size=hs.shape)

    cases = {
        "forward  numpy": lambda: kernels.forward_numpy(wc, uc, bc, xs),
        "forward  loops": lambda: kernels.forward_loops(wc, uc, bc, xs),
        "backward numpy": lambda: kernels.backward_numpy(wc, uc, xs, hs, cs, tcs, acts, dhs),
        "backward loops": lambda: kernels.backward_loops(wc, uc, xs, hs, cs, tcs, acts, dhs),
    }
    print(f"B={B} T={T} N={N} d={d} numba={'on' if HAVE_NUMBA else 'off'}")
    for name, fn in cases.items():
        fn()  # warm-up / JIT compile
        best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        print(f"{name}: {best * 1e3:8.3f} ms")


if __name__ == "__main__":
    main()
