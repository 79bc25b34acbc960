"""Time the compiled co-attention kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Reports microseconds per call for a single edge and for a node with four
neighbors (the fused group kernel), forward and forward+backward.
"""
import argparse
import timeit

import numpy as np

from gsn import _pykernels

try:
    from gsn import _ckernels
except ImportError:
    _ckernels = None


def make_case(rng, T, L, D, n):
    C = rng.normal(size=(T, D))
    S = rng.normal(size=(n * L, D))
    offsets = np.arange(n + 1) * L
    wi = rng.normal(size=3 * D) * 0.3
    Wo = rng.normal(size=(4 * D, D)) * 0.2
    bo = np.zeros(D)
    return C, S, offsets, wi, 0.1, Wo, bo


def bench(mod, case, repeat):
    C, S, offsets, wi, bi, Wo, bo = case
    gO = np.ones((C.shape[0], C.shape[1]))

    def fwd():
        return mod.group_forward(C, S, offsets, wi, bi, Wo, bo, True, True)

    def both():
        out, cache = fwd()
        mod.group_backward(gO, C, S, offsets, wi, Wo, True, True, cache)

    f = min(timeit.repeat(fwd, number=repeat, repeat=5)) / repeat * 1e6
    b = min(timeit.repeat(both, number=repeat, repeat=5)) / repeat * 1e6
    return f, b


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    mods = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    print(f"{'case':28s} {'backend':8s} {'fwd us':>9s} {'fwd+bwd us':>11s}")
    for label, (T, L, D, n) in {"edge T=10 L=10 D=16": (10, 10, 16, 1),
                                "group T=10 L=10 D=16 n=4": (10, 10, 16, 4),
                                "group T=12 L=12 D=32 n=4": (12, 12, 32, 4)}.items():
        case = make_case(rng, T, L, D, n)
        rows = [(name, *bench(mod, case, args.repeat)) for name, mod in mods]
        for name, f, b in rows:
            print(f"{label:28s} {name:8s} {f:9.1f} {b:11.1f}")
        if len(rows) == 2:
            print(f"{'':28s} {'speedup':8s} {rows[0][1] / rows[1][1]:8.1f}x {rows[0][2] / rows[1][2]:10.1f}x")


if __name__ == "__main__":
    main()
