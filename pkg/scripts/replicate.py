"""Directional replication: trained hint module versus the empty-hint scorer.

Runs the synthetic pipeline (data, BM25 top-20, instruction-pretrained mini-LM,
hint-module training, test reranking) for each seed and prints test R@10 of
both systems with the paired t-test.

    python scripts/replicate.py --seeds 0,1,2 --variant a
"""
import argparse
import time

import numpy as np

from qpeft.pipeline import replicate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--variant", default="a", choices=["a", "r"])
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    wins = 0
    for seed in (int(s) for s in args.seeds.split(",")):
        r = replicate(seed, args.variant.upper(), verbose=args.verbose)
        keys = sorted(r.qpeft)
        q = np.mean([r.qpeft[k] for k in keys])
        u = np.mean([r.upr[k] for k in keys])
        wins += r.passed()
        best = max(r.log, key=lambda e: e.eval_R10)
        print(f"seed {seed}: qpeft R@10 {q:.3f}  upr R@10 {u:.3f}  delta {r.delta:+.3f}  "
              f"t {r.t:.3f}  p {r.p:.4f}  best epoch {best.epoch}  {r.seconds:.0f}s", flush=True)
    print(f"seeds passing (delta >= 0.02, p < 0.05): {wins}; total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
