"""Time the convolution kernels on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Shapes follow a base-width-8 ResNet-18 at 64x64 input, the training
workload of the desk-scale experiment. Both backends must agree bitwise;
the script checks that before timing.
"""
import argparse
import statistics
import time

import numpy as np

from dilres import kernels
from dilres.convolution import ConvSpec, conv2d, conv2d_grad

# (label, batch, in channels, out channels, size, kernel, stride, pad, dilation)
CASES = [
    ("stem 7x7/2", 32, 3, 8, 64, 7, 2, 3, 1),
    ("stage1 3x3", 32, 8, 8, 16, 3, 1, 1, 1),
    ("stage3 3x3/2", 32, 16, 32, 8, 3, 2, 1, 1),
    ("stage4 3x3 l=3", 32, 64, 64, 4, 3, 1, 3, 3),
    ("wide 3x3 l=2", 8, 64, 64, 28, 3, 1, 2, 2),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def run_case(case, repeat):
    label, n, ci, co, size, k, s, p, l = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, ci, size, size)).astype(np.float32)
    w = rng.standard_normal((co, ci, k, k)).astype(np.float32)
    b = rng.standard_normal(co).astype(np.float32)
    spec = ConvSpec.square(k, s, p, l)
    y = conv2d(x, w, b, spec, backend="numpy")
    g = rng.standard_normal(y.shape).astype(np.float32)

    rows = []
    for backend in ("numpy", "numba"):
        fwd = lambda: conv2d(x, w, b, spec, backend=backend)
        bwd = lambda: conv2d_grad(x, w, spec, g, backend=backend)
        fwd()
        bwd()  # compile and warm caches
        rows.append((backend, best_of(fwd, repeat)[0], best_of(bwd, repeat)[0]))

    same = np.array_equal(conv2d(x, w, b, spec, backend="numba"), y)
    ref = conv2d_grad(x, w, spec, g, backend="numpy")
    got = conv2d_grad(x, w, spec, g, backend="numba")
    same &= all(np.array_equal(a, c) for a, c in zip(ref, got) if a is not None)
    return label, rows, same


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="first two cases only")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    cases = CASES[:2] if args.quick else CASES
    print(f"{'case':<16} {'pass':<9} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}  bitwise")
    for case in cases:
        label, rows, same = run_case(case, args.repeat)
        (_, np_f, np_b), (_, nb_f, nb_b) = rows
        for name, a, c in (("forward", np_f, nb_f), ("backward", np_b, nb_b)):
            print(f"{label:<16} {name:<9} {a * 1e3:9.2f} {c * 1e3:9.2f} {a / c:7.1f}x  {same}")


if __name__ == "__main__":
    main()
