"""Why NIC-side ordering needs peer-hashed queue pairs.

A NIC fence flag only orders requests on the same connection. If the proxy
spreads requests round-robin over queue pairs, a Signal can leave on a
different QP from the Put it announces and arrive first. Hashing by
destination PE keeps every Put and its Signal on one QP.

    python demos/qp_bug.py
"""

from fencesim.metrics import verify_ordering
from fencesim.protocols import NIC_ORDER_ONLY, ordering_bug_workload, run_dispatch


def main():
    wl = ordering_bug_workload()
    for policy in ("round_robin", "peer_hash"):
        tr = run_dispatch(NIC_ORDER_ONLY.with_(qp_policy=policy), wl)
        bad = verify_ordering(tr)
        print(f"{policy:<12} {len(bad)} ordering violation(s)")
        for v in bad[:3]:
            print(f"    {v}")


if __name__ == "__main__":
    main()
