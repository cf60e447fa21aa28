"""Timing helpers: jet cost against kernel width, and compiled against pure-Python kernels."""

import time

import numpy as np

from . import _backend
from .gaussian import jet2

BENCH_HEADER = ("W", "H", "D", "w", "seconds")


def width_to_sigma(w):
    """Scale whose default radius gives a kernel of odd width ``w``."""
    if w < 3 or w % 2 == 0:
        raise ValueError(f"kernel width must be odd and >= 3, got {w}")
    return (w - 1) / 2 / 3.0


def time_jet(v, sigma, repeats=3):
    """Best wall time of ``repeats`` jet evaluations (the first call warms caches)."""
    jet2(v, sigma)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        jet2(v, sigma)
        best = min(best, time.perf_counter() - t0)
    return best


def width_sweep(size=64, widths=(5, 9, 13, 17), repeats=3, seed=0):
    """Rows ``(W, H, D, w, seconds)`` for a fixed random single-channel cube."""
    shape = (size,) * 3 if np.isscalar(size) else tuple(size)
    v = np.random.default_rng(seed).random(shape + (1,), dtype=np.float32)
    return [shape + (w, time_jet(v, width_to_sigma(w), repeats)) for w in widths]


def linear_fit(x, y):
    """Least-squares ``y = a + b x``; returns ``(a, b, r_squared)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b, a = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a + b * x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def compare_backends(size=32, sigma=1.0, repeats=3, seed=0):
    """Jet time per available backend, plus the max output difference between them."""
    v = np.random.default_rng(seed).random((size,) * 3 + (1,), dtype=np.float32)
    before = _backend.current()
    times, outs = {}, {}
    try:
        for name in _backend.available():
            _backend.set_backend(name)
            times[name] = time_jet(v, sigma, repeats)
            outs[name] = jet2(v, sigma)
    finally:
        _backend.set_backend(before)
    ref = outs["python"]
    diff = max(float(np.max(np.abs(o - ref))) for o in outs.values())
    return times, diff
