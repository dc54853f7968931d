"""Timing comparison: compiled kernel extension vs the NumPy fallback.

Runs every kernel at a few workload-shaped sizes, checks that the two
backends agree, and prints per-call times with the speedup.  Run from a
checkout or an installed environment:

    python3 benchmarks/bench_kernels.py [--repeats 7] [--target-ms 50]
"""

import argparse
import time

import numpy as np

from lgc._kernels import _numpy as ref

try:
    from lgc._kernels import _core as fast
except ImportError:
    fast = None


def support_powers(rng, n, order):
    # symmetric normalized-laplacian-like support, ||S|| ~ 1
    a = (rng.uniform(size=(n, n)) < 0.4).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    deg = np.maximum(a.sum(axis=1), 1.0)
    d = 1.0 / np.sqrt(deg)
    s = np.eye(n) - d[:, None] * a * d[None, :]
    return np.stack([np.linalg.matrix_power(s, k) for k in range(order + 1)])


def make_cases(rng):
    """(kernel name, size tag, positional args) for both backends."""
    cases = []
    for n, g, f in ((10, 10, 16), (15, 10, 50), (100, 10, 50)):
        tag = f"n={n} g={g} f={f}"
        powers = support_powers(rng, n, 2)
        x = rng.standard_normal((n, g))
        w = rng.standard_normal((3, g, f)) * 0.3
        cases.append(("filter_apply", tag, (powers, x, w)))
        mask = (rng.uniform(size=g) < 0.5).astype(float)
        cases.append(("masked_filter_apply", tag, (powers, x, w, mask)))

        xs = rng.standard_normal((n, f))
        ws = rng.standard_normal((3, f, f)) * 0.3
        bias = rng.uniform(0.0, 0.5, f)
        rate_in = np.maximum(rng.standard_normal((n, f)), 0.0)
        smask = np.ones(f)
        cases.append(("lgtc_rate", tag, (powers, xs, ws, bias, rate_in, smask)))

        coup = rng.standard_normal((2, f, f)) * 0.1
        drive = rng.standard_normal((n, f)) * 0.5
        decay = rng.uniform(0.5, 1.5, f)
        cases.append(("lgtc_integrate", tag + " steps=10",
                      (powers, xs, coup, ws, bias, rate_in, drive, decay,
                       smask, 10, 0.005)))

    for n in (10, 50, 200):
        pos = rng.uniform(-3, 3, (n, 2))
        vel = rng.uniform(-2, 2, (n, 2))
        cases.append(("flocking_pass", f"n={n}",
                      (pos, vel, 0, np.zeros(2), 4.0, 1.0)))
    return cases


def time_call(fn, args, repeats, target_ms):
    # calibrate the inner loop so each sample runs ~target_ms, take the min
    fn(*args)
    t0 = time.perf_counter()
    fn(*args)
    once = time.perf_counter() - t0
    number = max(1, int(target_ms / 1000.0 / max(once, 1e-9)))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / number)
    return best


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--target-ms", type=float, default=50.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if fast is None:
        print("compiled extension not built; nothing to compare "
              "(pip install -e . rebuilds it)")
        return 1

    rng = np.random.default_rng(args.seed)
    header = f"{'kernel':<22}{'size':<24}{'numpy':>12}{'compiled':>12}" \
             f"{'speedup':>9}{'max diff':>11}"
    print(header)
    print("-" * len(header))
    for name, tag, call_args in make_cases(rng):
        t_ref = time_call(getattr(ref, name), call_args, args.repeats,
                          args.target_ms)
        t_fast = time_call(getattr(fast, name), call_args, args.repeats,
                           args.target_ms)
        diff = max_diff(getattr(ref, name)(*call_args),
                        getattr(fast, name)(*call_args))
        print(f"{name:<22}{tag:<24}{t_ref * 1e6:>10.1f}us"
              f"{t_fast * 1e6:>10.1f}us{t_ref / t_fast:>8.1f}x"
              f"{diff:>11.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
