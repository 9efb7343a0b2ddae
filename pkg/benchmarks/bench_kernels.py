"""Compare the compiled branch-unit kernel against the pure-Python fallback.

Runs the same random branch stream through both kernels, checks that the
outcome codes agree, and prints throughput.  Then times a short attack
campaign with each kernel (the pure one via BRANCHSHADOW_PURE=1).

    python3 benchmarks/bench_kernels.py [--branches N] [--trials N]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from branchshadow import _kernels_py

try:
    from branchshadow import _kernels
except ImportError:
    _kernels = None


def branch_stream(n, seed=0):
    rng = np.random.default_rng(seed)
    # a few hundred hot branches plus aliasing partners 2^31 away
    hot = 0x1000_0000 + 4 * rng.integers(0, 4096, 512)
    addrs = hot[rng.integers(0, len(hot), n)] + (rng.random(n) < 0.1) * (1 << 31)
    kinds = rng.integers(0, 3, n)
    taken = rng.random(n) < 0.6
    targets = addrs + 4 * rng.integers(-64, 64, n)
    return [(int(k), int(a), int(t), int(a) + 4, bool(tk or k == 1), int(t))
            for k, a, t, tk in zip(kinds, addrs, targets, taken)]


def run_stream(mod, stream, gshare):
    unit = mod.BranchUnit(4, 1024, gshare, 16)
    ex = unit.execute
    t0 = time.perf_counter()
    out = [ex(*b) for b in stream]
    return time.perf_counter() - t0, out


def time_campaign(trials, pure):
    env = dict(os.environ, BRANCHSHADOW_PURE="1" if pure else "0")
    code = ("import time;from branchshadow.campaign import *;t=time.perf_counter();"
            f"r=run_campaign(ExperimentConfig(victim='modexp',trials={trials}));"
            "print(time.perf_counter()-t, r.accuracy)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    return float(out[0]), float(out[1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--branches", type=int, default=200_000)
    ap.add_argument("--trials", type=int, default=50)
    args = ap.parse_args()
    if _kernels is None:
        sys.exit("compiled kernel not built; run: pip install -e . --no-build-isolation")

    stream = branch_stream(args.branches)
    print(f"{'kernel':<10}{'predictor':<11}{'Mbranch/s':>10}{'speedup':>9}")
    for gshare in (False, True):
        tp, op = run_stream(_kernels_py, stream, gshare)
        tc, oc = run_stream(_kernels, stream, gshare)
        if op != oc:
            sys.exit("kernel outputs differ")
        name = "gshare" if gshare else "btb-only"
        print(f"{'python':<10}{name:<11}{args.branches / tp / 1e6:>10.3f}{1.0:>9.2f}")
        print(f"{'compiled':<10}{name:<11}{args.branches / tc / 1e6:>10.3f}{tp / tc:>9.2f}")

    tp, ap_ = time_campaign(args.trials, True)
    tc, ac = time_campaign(args.trials, False)
    print(f"\nmodexp campaign, {args.trials} trials: python {tp:.2f}s, compiled {tc:.2f}s "
          f"({tp / tc:.2f}x), accuracy {ap_:.4f} / {ac:.4f}")


if __name__ == "__main__":
    main()
