"""Benchmark the compiled kernel backend against the pure-Python fallback.

Runs each hot kernel on both backends, checks that the outputs agree bit
for bit, and prints per-op timings with the speedup factor. Usage:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import sys
import time
from array import array

from cduq.kernels import get_backend


def _buf(n, seed, backend):
    out = array("d", bytes(8 * n))
    backend.fill_gaussian(out, seed, 0)
    return out


def _bench(fn, repeats):
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        best = dt if best is None else min(best, dt)
    return best


def _cases(backend):
    m = k = n = 64
    a = _buf(m * k, 1, backend)
    b = _buf(k * n, 2, backend)
    out_mm = array("d", bytes(8 * m * n))
    vec = _buf(4096, 3, backend)
    out_v = array("d", bytes(8 * 4096))
    grad = _buf(4096, 4, backend)
    gauss = array("d", bytes(8 * 4096))

    def bench_adam():
        p = array("d", vec)
        mom = array("d", bytes(8 * 4096))
        vel = array("d", bytes(8 * 4096))
        out = array("d", bytes(8 * 4096))
        backend.adam_update(p, grad, mom, vel, 1, 1e-3, 0.9, 0.999, 1e-8, 0.1, out)
        return out

    idx = array("q", [(11 * i + 5) % 4096 for i in range(4096)])
    out_g = array("d", bytes(8 * 4096))

    def bench_scatter():
        out = array("d", bytes(8 * 4096))
        backend.vscatter_add(vec, idx, out)
        return out

    return [
        ("matmul 64x64x64", lambda: backend.matmul(a, b, out_mm, m, k, n), out_mm),
        ("sigmoid 4096", lambda: backend.vsigmoid(vec, out_v), out_v),
        ("gaussian 4096", lambda: backend.fill_gaussian(gauss, 9, 0), gauss),
        ("gather 4096", lambda: backend.vgather(vec, idx, out_g), out_g),
        ("scatter 4096", bench_scatter, None),
        ("adam 4096", bench_adam, None),
    ]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args(argv)

    py = get_backend("python")
    try:
        cc = get_backend("c")
    except ImportError:
        print("compiled backend unavailable; nothing to compare", file=sys.stderr)
        return 1

    print(f"{'kernel':<18} {'python':>12} {'compiled':>12} {'speedup':>9}")
    for (name, py_fn, py_out), (_, cc_fn, cc_out) in zip(_cases(py), _cases(cc)):
        t_py = _bench(py_fn, args.repeats)
        t_cc = _bench(cc_fn, args.repeats)
        r_py = py_fn() if py_out is None else py_out
        r_cc = cc_fn() if cc_out is None else cc_out
        if bytes(r_py) != bytes(r_cc):
            print(f"{name}: backends disagree", file=sys.stderr)
            return 1
        print(f"{name:<18} {t_py * 1e6:>10.1f}us {t_cc * 1e6:>10.1f}us "
              f"{t_py / t_cc:>8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
