"""Signaling efficiency collapse and recovery in the Put+Signal microbenchmark.

One PE sends N small Puts, each followed by a Signal. The coupled protocol
puts a proxy fence between every Put and its Signal, so each of the N
fences drains the NIC before the next Put may leave. Efficiency is the
Put-only makespan divided by the signaled makespan. The combined protocol
issues all Puts first and one NIC-flagged Signal per destination.

    python demos/collapse.py --nodes 8 --size 4096
"""

import argparse

from fencesim.experiments import micro_point


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=8)
    ap.add_argument("--size", type=int, default=4096, help="bytes per Put")
    ap.add_argument("--N", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 64, 128])
    args = ap.parse_args()

    print(f"{args.nodes} nodes, {args.size} B Puts, slingshot-like latency")
    print(f"{'N':>5} {'put-only us':>12} {'coupled us':>11} {'eff':>6} {'combined us':>12} {'eff':>6}"
          f" {'fence share':>12}")
    for N in args.N:
        p = micro_point(N, args.size, args.nodes)
        print(f"{N:>5} {p['put_only_ns'] / 1e3:>12.1f} {p['coupled_ns'] / 1e3:>11.1f}"
              f" {p['efficiency_coupled']:>6.3f} {p['combined_ns'] / 1e3:>12.1f}"
              f" {p['efficiency_combined']:>6.3f} {p['fence_share']:>12.1%}")

    print("\nThe coupled column pays one full drain per Put, so its makespan grows")
    print("linearly with N while the Put-only run pipelines. Fence time dominates")
    print("even at N = 1, since a drain waits out the tail of every remote peer.")
    print("The combined column recovers most of the gap: only the first Signal")
    print("to each destination waits, and it waits at the NIC, not in the proxy.")


if __name__ == "__main__":
    main()
