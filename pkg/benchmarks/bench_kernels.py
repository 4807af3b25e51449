"""Compare the compiled and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]

Checks that both backends agree (bit-exact for the warp, 1e-12 for the
geodesic angles) and reports the best-of-N wall time for each.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from headpose import kernels
from headpose.geometry import random_quaternions


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=480, help="source image side")
    ap.add_argument("--out-size", type=int, default=129, help="crop side")
    ap.add_argument("--crops", type=int, default=20, help="crops per timing")
    ap.add_argument("--quats", type=int, default=200_000, help="quaternion pairs")
    args = ap.parse_args(argv)

    if not kernels.HAVE_COMPILED:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")

    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(args.size, args.size), dtype=np.uint8)
    maps = []
    for _ in range(args.crops):
        k = rng.uniform(1.5, 3.0)
        th = rng.uniform(-0.5, 0.5)
        c, s = np.cos(th), np.sin(th)
        maps.append(np.array([[k * c, -k * s, rng.uniform(0, 100)], [k * s, k * c, rng.uniform(0, 100)]]))
    a = random_quaternions(rng, args.quats)
    b = random_quaternions(rng, args.quats)

    def warp():
        return [kernels.warp_bilinear(img, m, args.out_size, args.out_size) for m in maps]

    def geo():
        return kernels.geodesic_angles(a, b)

    rows = []
    results = {}
    for name in ("compiled", "python"):
        kernels.use_backend(name)
        results[name] = (warp(), geo())
        rows.append((name, best_time(warp, args.repeat), best_time(geo, args.repeat)))
    kernels.use_backend("compiled")

    for x, y in zip(results["compiled"][0], results["python"][0]):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_allclose(results["compiled"][1], results["python"][1], rtol=0, atol=1e-12)

    print(f"{'backend':<10} {'warp (' + str(args.crops) + ' crops)':>20} {'geodesic (' + str(args.quats) + ')':>22}")
    for name, tw, tg in rows:
        print(f"{name:<10} {tw * 1e3:>17.2f} ms {tg * 1e3:>19.2f} ms")
    (_, cw, cg), (_, pw, pg) = rows
    print(f"speedup    {pw / cw:>18.1f}x {pg / cg:>20.1f}x")
    print("backends agree")


if __name__ == "__main__":
    main()
