"""Signal group size sweep and the three-way speedup decomposition.

Decoupled dispatch puts one fence in front of each signal group. Group size
1 keeps a fence per expert but already moves every Put ahead of the
Signals. Larger groups remove fences until latency flattens; the knee is
the smallest size within 5% of the best. Adding NIC-side ordering on top
gives the last step.

    python demos/group_size_knee.py --nodes 8 --S 1024
"""

import argparse

from fencesim.experiments import decomposition
from fencesim.workload import model_preset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=8)
    ap.add_argument("--S", type=int, default=1024)
    args = ap.parse_args()

    res = decomposition(model_preset("qwen3-30b"), args.nodes, args.S)
    best = min(res.sweep.values())
    print(f"decoupled dispatch, {args.nodes} nodes, S={args.S}")
    print(f"{'group size':>10} {'comm us':>9} {'vs best':>8}")
    for gs, t in sorted(res.sweep.items()):
        mark = "  <- knee" if gs == res.knee else ""
        print(f"{gs:>10} {t / 1e3:>9.1f} {t / best - 1:>8.1%}{mark}")

    d = res.decomposition
    print(f"\ncoupled {d.t_coupled / 1e3:.1f} us -> combined {d.t_full / 1e3:.1f} us"
          f" ({d.t_coupled / d.t_full:.2f}x)")
    gains = d.relative_gains()
    for part, share in d.fractions().items():
        print(f"  {part:<16} {share:>6.1%} of the reduction, {gains[part]:>6.1%} relative step")


if __name__ == "__main__":
    main()
