"""Time the compiled allocation kernels against the pure-Python fallback.

Usage: python3 benchmarks/bench_kernels.py [--n 50000] [--repeat 3]
"""
import argparse
import time

import numpy as np

from upliftlab import _kernels_py
from upliftlab.metrics import CostModel

try:
    from upliftlab import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=50_000, help="individuals")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--budgets", type=int, default=101)
    args = p.parse_args()

    rng = np.random.default_rng(0)
    preds = rng.uniform(0.05, 0.95, size=(args.n, 3))
    cost, reward = CostModel().expected_increments(preds)
    t = rng.integers(0, 3, args.n)
    y = (rng.uniform(size=args.n) < 0.5).astype(float)
    c, r = CostModel().realized(t, y)

    backends = [("python", _kernels_py)] + ([("compiled", _kernels)] if _kernels else [])
    rows = []
    for name, k in backends:
        t_chain, chains = best_of(lambda: k.upgrade_chains(cost, reward), args.repeat)
        ind, to_arm, d_cost, _ = chains
        order = np.argsort(-chains[3] / d_cost, kind="stable")
        budgets = np.linspace(0.0, d_cost.sum(), args.budgets)
        sweep_args = (ind[order], to_arm[order], d_cost[order], args.n, t, c, r, budgets)
        t_sweep, out = best_of(lambda: k.ras_sweep(*sweep_args), args.repeat)
        rows.append((name, t_chain, t_sweep, out))

    print(f"n={args.n} budgets={args.budgets} best of {args.repeat}")
    print(f"{'backend':<10}{'upgrade_chains':>16}{'ras_sweep':>12}")
    for name, a, b, _ in rows:
        print(f"{name:<10}{a:>15.4f}s{b:>11.4f}s")
    if len(rows) == 2:
        (_, a0, b0, o0), (_, a1, b1, o1) = rows
        print(f"speedup   {a0 / a1:>15.1f}x{b0 / b1:>11.1f}x")
        print("outputs identical:", bool(np.array_equal(o0, o1)))
    else:
        print("compiled kernels not built; run pip install -e . --no-build-isolation")


if __name__ == "__main__":
    main()
