"""Timing table for the compiled trajectory kernels against the numpy fallback.

Usage:  python3 benchmarks/bench_kernels.py [--quick]

The integrate-and-average loops dominate dataset generation and surrogate
pair acquisition, so this is the one place a compiled core pays for itself.
Both backends must agree to floating-point roundoff; the table reports the
observed speedup.
"""

import argparse
import sys
import time

import numpy as np

from popinv.forward import Lorenz96MultiScale, Lorenz96SingleScale, kernel_backend
from popinv.forward import _lorenz_np

try:
    from popinv.forward import _lorenz_cy
except ImportError:
    _lorenz_cy = None


def _time(fn, repeats=3):
    best = np.inf
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - t0)
    return best, result


def bench_single(backend, batch, n_burn, n_avg):
    model = Lorenz96SingleScale(K=6)
    rng = np.random.default_rng(0)
    z = 8.0 + rng.standard_normal(batch)
    s0 = rng.standard_normal((batch, model.K))
    return _time(lambda: backend.integrate_features_single(z, s0, model.dt, n_burn, n_avg))


def bench_multi(backend, batch, n_burn, n_avg):
    model = Lorenz96MultiScale(K=9, L=10)
    rng = np.random.default_rng(0)
    z = np.column_stack(
        [10.0 + rng.standard_normal(batch), 0.8 + 0.1 * rng.standard_normal(batch), 1.0 + 0.2 * rng.standard_normal(batch)]
    )
    s0 = 5.0 * rng.standard_normal((batch, model.state_dim))
    return _time(
        lambda: backend.integrate_features_multi(
            z, s0, model.K, model.L, model.c, model.dt, n_burn, n_avg
        )
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="Shorter trajectories.")
    args = parser.parse_args()

    if _lorenz_cy is None:
        print("compiled backend is not built; nothing to compare", file=sys.stderr)
        return 1

    scale = 0.2 if args.quick else 1.0
    cases = [
        ("single K=6", bench_single, 16, int(500 * scale), int(2500 * scale)),
        ("multi K=9 L=10", bench_multi, 4, int(2000 * scale), int(10000 * scale)),
    ]

    print(f"active backend at import: {kernel_backend()}")
    print(f"{'case':<16} {'steps':>10} {'numpy':>10} {'cython':>10} {'speedup':>8}  agreement")
    for name, fn, batch, n_burn, n_avg in cases:
        steps = batch * (n_burn + n_avg)
        t_np, (f_np, d_np) = fn(_lorenz_np, batch, n_burn, n_avg)
        t_cy, (f_cy, d_cy) = fn(_lorenz_cy, batch, n_burn, n_avg)
        both = np.isfinite(f_np) & np.isfinite(f_cy)
        diff = float(np.max(np.abs(f_np[both] - f_cy[both]))) if both.any() else 0.0
        flags = "flags equal" if np.array_equal(d_np, d_cy) else "FLAGS DIFFER"
        print(
            f"{name:<16} {steps:>10d} {t_np:>9.3f}s {t_cy:>9.3f}s {t_np / t_cy:>7.1f}x  "
            f"max|diff| {diff:.2e}, {flags}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
