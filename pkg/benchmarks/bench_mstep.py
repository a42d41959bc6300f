"""Time the max-product M step under the compiled and pure-Python backends.

    python3 benchmarks/bench_mstep.py --sizes 32 64 128 --repeats 20
"""
import argparse
import time

import numpy as np

from mpem import max_product as mp
from mpem.tree import HmtParams, build_tree, sample_prior


def time_mstep(inp, backend, repeats):
    mp.mstep(inp, backend=backend)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        mp.mstep(inp, backend=backend)
        times.append(time.perf_counter() - t0)
    return np.median(times), np.min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256], help="square image side")
    ap.add_argument("--levels", type=int, default=4)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = ["python"] + (["compiled"] if mp.BACKEND == "compiled" else [])
    if len(backends) == 1:
        print("compiled extension not built; timing the python backend only")
    params, sigma2 = HmtParams(), 1e-6
    print(f"{'p':>8} " + " ".join(f"{b + ' ms':>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for n in args.sizes:
        tree = build_tree(n, n, args.levels)
        truth = sample_prior(tree, params, sigma2, args.seed)
        z = truth.s + np.sqrt(sigma2) * np.random.default_rng(args.seed).standard_normal(tree.p)
        inp = mp.MstepInput(z, sigma2, tree, params)
        q_ref = None
        med = {}
        for b in backends:
            med[b], _ = time_mstep(inp, b, args.repeats)
            q = mp.mstep(inp, backend=b).q
            assert q_ref is None or np.array_equal(q, q_ref), "backends disagree"
            q_ref = q
        row = f"{tree.p:>8} " + " ".join(f"{1e3 * med[b]:>14.3f}" for b in backends)
        if len(backends) == 2:
            row += f"   {med['python'] / med['compiled']:>6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
