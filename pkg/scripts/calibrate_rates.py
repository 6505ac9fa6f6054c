#!/usr/bin/env python3
"""Empirical validation of the committed (design error -> code rate) table.

For every table row, runs `trials` decodes at n = 10^4 with the flip
probability sitting exactly on the row's design bound, and reports the
success count. A row passes when at least 99% of blocks decode. Run this
after touching the table, the graph construction or the decoder:

    python3 scripts/calibrate_rates.py [trials]
"""

import sys
import time

import numpy as np

from qkdsim.reconcile import RATE_TABLE, build_factor_graph, compute_syndrome, decode
from qkdsim.errors import DecodeFailure
from qkdsim.seeds import derive_seed

BLOCK = 10_000


def success_count(bound: float, rate: float, trials: int) -> int:
    wins = 0
    rng = np.random.default_rng(20260810)
    for trial in range(trials):
        alice = rng.integers(0, 2, BLOCK).astype(np.uint8)
        bob = alice ^ (rng.random(BLOCK) < bound).astype(np.uint8)
        graph = build_factor_graph(
            BLOCK, rate, derive_seed(bytes(32), f"cal/{bound}/{trial}")
        )
        syndrome = compute_syndrome(alice, graph)
        try:
            fixed = decode(bob, syndrome, graph, bound, max_iters=100)
            wins += np.array_equal(fixed, alice)
        except DecodeFailure:
            pass
    return wins


def main() -> int:
    trials = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    print(f"{'bound':>7} {'rate':>6} {'syn/h(p)':>9} {'success':>9}  time")
    all_ok = True
    for bound, rate in RATE_TABLE:
        h = -bound * np.log2(bound) - (1 - bound) * np.log2(1 - bound) if bound else 0
        t0 = time.time()
        wins = success_count(bound, rate, trials)
        ok = wins >= int(np.ceil(0.99 * trials))
        all_ok &= ok
        print(
            f"{bound:7.3f} {rate:6.2f} {(1 - rate) / h if h else float('inf'):9.2f} "
            f"{wins:4d}/{trials:<4d} {time.time() - t0:5.1f}s {'' if ok else ' <-- FAIL'}"
        )
    print("table OK" if all_ok else "table NEEDS ADJUSTMENT")
    return 0 if all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
