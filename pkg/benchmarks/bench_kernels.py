"""Time the numba kernels against the pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is warmed up once per backend (so JIT compilation is excluded)
and then timed as the best of ``--repeat`` runs.
"""
import argparse
import time

import numpy as np

from dkfac import _accel, linalg, nn


def best_of(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def cases(rng):
    out = []
    for n in (16, 65, 129):
        x = rng.standard_normal((n, n + 8))
        m = x @ x.T / (n + 8) + 0.1 * np.eye(n)
        out.append((f"sym_eig n={n}", lambda m=m: linalg.sym_eig(m)))
        out.append((f"inverse n={n}", lambda m=m: linalg.inverse(m)))
    spec = nn.LayerSpec.conv2d(8, 16, 3, stride=1, padding=1)
    x = rng.standard_normal((32, 8, 16, 16))
    cols = nn.im2col(x, spec)[:, :-1]
    out.append(("im2col 32x8x16x16 k3", lambda: nn.im2col(x, spec)))
    out.append(("col2im 32x8x16x16 k3", lambda: nn.col2im(cols, spec, x.shape)))
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend can be timed")
    backends = ["numpy", "numba"] if _accel.HAVE_NUMBA else ["numpy"]
    rng = np.random.default_rng(0)
    previous = _accel.backend()
    print(f"{'kernel':<24}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    try:
        for name, fn in cases(rng):
            times = []
            for b in backends:
                _accel.set_backend(b)
                times.append(best_of(fn, args.repeat))
            line = f"{name:<24}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
            if len(times) == 2:
                line += f"{times[0] / times[1]:>11.1f}x"
            print(line)
    finally:
        _accel.set_backend(previous)


if __name__ == "__main__":
    main()
