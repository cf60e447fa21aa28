"""Compiled vs pure-Python kernel timings, and jet cost against kernel width.

    python3 benchmarks/bench_backends.py [--size 48] [--repeats 3] [--csv out.csv]
"""

import argparse
import csv
import time

import numpy as np

from movfnet import _backend
from movfnet.bench import linear_fit, width_sweep
from movfnet.frame import frame_from_volume
from movfnet.gaussian import jet2
from movfnet.network import medmnist_arch, network_forward, random_params


def best_of(fn, repeats):
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size):
    rng = np.random.default_rng(0)
    v = rng.random((size,) * 3 + (1,), dtype=np.float32)
    batch = rng.random((2, 29, 29, 29, 1), dtype=np.float32)
    arch = medmnist_arch(2)
    params = random_params(arch, 0)
    return {
        f"jet2 sigma=1 {size}^3": lambda: jet2(v, 1.0),
        f"jet2 sigma=2 {size}^3": lambda: jet2(v, 2.0),
        f"frames {size}^3": lambda: frame_from_volume(v, 2.0),
        "forward 2x29^3": lambda: network_forward(batch, arch, params),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--csv", default=None, help="also write rows (case, backend, seconds)")
    args = ap.parse_args(argv)

    before = _backend.current()
    rows = []
    try:
        for name in _backend.available():
            _backend.set_backend(name)
            for label, fn in cases(args.size).items():
                rows.append((label, name, best_of(fn, args.repeats)))
    finally:
        _backend.set_backend(before)

    print(f"{'case':<24} {'backend':<9} {'seconds':>9}")
    for label, name, sec in rows:
        print(f"{label:<24} {name:<9} {sec:9.4f}")
    if len(_backend.available()) == 1:
        print("(compiled core not built; only the pure-Python backend was timed)")

    sweep = width_sweep(size=64, widths=(5, 9, 13, 17), repeats=args.repeats)
    a, b, r2 = linear_fit([r[3] for r in sweep], [r[4] for r in sweep])
    print("\njet2 on 64^3, current backend:")
    for r in sweep:
        print(f"  w={r[3]:<3} {r[4]:.4f}s")
    print(f"  fit t = {a:.4f} + {b:.5f} w, R^2 = {r2:.4f}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("case", "backend", "seconds"))
            w.writerows(rows)


if __name__ == "__main__":
    main()
