"""Combined-protocol speedup under skewed expert routing.

Tokens are routed with a Zipf distribution over experts. Higher exponents
concentrate traffic on a few hot experts, so fewer transfers carry most of
the bytes and there are fewer fences left to remove.

    python demos/skew.py --nodes 8 --S 1024
"""

import argparse

import numpy as np

from fencesim.experiments import skew_speedups
from fencesim.workload import model_preset, zipf_route


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=8)
    ap.add_argument("--S", type=int, default=1024)
    ap.add_argument("--skews", type=float, nargs="+", default=[0.0, 0.5, 1.0, 1.5])
    args = ap.parse_args()

    model = model_preset("qwen3-30b")
    speedups = skew_speedups(model, args.nodes, args.S, args.skews)
    print(f"{'zipf s':>7} {'top-10 share':>13} {'speedup':>8}")
    for s, sp in speedups.items():
        counts = zipf_route(100_000, model.E, s, 1, seed=0)
        top = np.sort(counts)[::-1][:10].sum() / counts.sum()
        print(f"{s:>7.1f} {top:>13.1%} {sp:>8.2f}")


if __name__ == "__main__":
    main()
