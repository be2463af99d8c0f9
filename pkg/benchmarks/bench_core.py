"""Timing of the compiled kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_core.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from fedcausal import _core


def cases(rng):
    a = rng.normal(size=(300, 10))
    b = rng.normal(size=(200, 10))
    omega = rng.normal(size=(200, 10))
    u = rng.normal(size=(2000, 10))
    lw = rng.normal(size=20000)
    lu = np.log(rng.uniform(size=20000))
    lw2 = rng.normal(size=(500, 100))
    lu2 = np.log(rng.uniform(size=(500, 100)))
    return {
        "gram_gaussian 300x200": lambda be: _core.gram_gaussian(a, b, 1.5, backend=be),
        "gram_laplacian 300x200": lambda be: _core.gram_laplacian(a, b, 1.5, backend=be),
        "rff_features 2000x200": lambda be: _core.rff_features(u, omega, backend=be),
        "mh_chain 20000 steps": lambda be: _core.independent_mh_chain(lw, lu, backend=be),
        "mh_chains 500x100": lambda be: _core.independent_mh_chains(lw2, lu2, backend=be),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = list(_core.BACKENDS)
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {}
        for be in backends:
            fn(be)  # warm up
            times[be] = min(timeit.repeat(lambda: fn(be), number=1, repeat=args.repeat))
        ratio = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{name:<26}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends) + f"{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
