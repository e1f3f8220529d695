#!/usr/bin/env python3
"""Compare the compiled CTC kernel against the pure-numpy fallback.

Run from the repository root after installing the package:

    python3 benchmarks/bench_ctc.py [--trials 50]

Both backends are imported directly so one process can time the two
implementations side by side on identical inputs.
"""

import argparse
import time

import numpy as np

from vadasr.kernels import BACKEND, _ctc_py

try:
    from vadasr.kernels import _ctc_cy
except ImportError:
    _ctc_cy = None


def make_instance(rng, T, K, L):
    logits = rng.normal(size=(T, K))
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    targets = rng.integers(0, K - 1, size=L).astype(np.int64)
    return log_probs, targets


def time_backend(fn, instances, blank):
    t0 = time.perf_counter()
    losses = []
    for log_probs, targets in instances:
        loss, _ = fn(log_probs, targets, blank)
        losses.append(loss)
    return time.perf_counter() - t0, losses


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=50,
                    help="instances per problem size")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if _ctc_cy is None:
        print("compiled extension not available; nothing to compare "
              f"(active backend: {BACKEND})")
        return

    rng = np.random.default_rng(args.seed)
    sizes = [(50, 7, 10), (200, 7, 30), (500, 28, 60), (1000, 28, 120)]
    print(f"active backend: {BACKEND}; {args.trials} instances per size\n")
    print(f"{'T':>6} {'K':>4} {'L':>4} {'numpy (ms)':>12} "
          f"{'cython (ms)':>12} {'speedup':>8} {'max |Δloss|':>12}")
    for T, K, L in sizes:
        instances = [make_instance(rng, T, K, L) for _ in range(args.trials)]
        t_py, l_py = time_backend(_ctc_py.ctc_forward_backward, instances, K - 1)
        t_cy, l_cy = time_backend(_ctc_cy.ctc_forward_backward, instances, K - 1)
        diff = max(abs(a - b) for a, b in zip(l_py, l_cy))
        print(f"{T:>6} {K:>4} {L:>4} {1000 * t_py / args.trials:>12.3f} "
              f"{1000 * t_cy / args.trials:>12.3f} "
              f"{t_py / t_cy:>7.1f}x {diff:>12.2e}")


if __name__ == "__main__":
    main()
