"""Experiment suites built on ``run_dispatch``: microbenchmark grid,
ablation, group-size decomposition, alpha-beta sweeps, skew, and randomized
ordering verification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import (Decomposition, DegenerateFitError, fence_accounting, fit_alpha_beta,
                      signaling_efficiency, speedup_decomposition, verify_ordering)
from .protocols import (COMBINED, DECOUPLED_ONLY, NIC_ORDER_ONLY, SAFE_PROTOCOLS, VANILLA,
                        ProtocolConfig, ordering_bug_workload, run_dispatch, run_microbenchmark)
from .sim import ConfigError
from .transport import LATENCY_PRESETS, PROXY_FENCE, LatencyModel
from .workload import (ClusterConfig, ComputeModel, DispatchWorkload, ModelConfig, build_dispatch,
                       message_size)

ABLATION = {
    "vanilla": VANILLA,
    "decoupled": DECOUPLED_ONLY,
    "nic_order": NIC_ORDER_ONLY,
    "combined": COMBINED,
}


# ----------------------------------------------------------- microbenchmark


def micro_point(N: int, size: int, nodes: int, latency: Optional[LatencyModel] = None,
                gpus_per_node: int = 4) -> dict:
    """Put-only, coupled and combined runs at one grid point.

    PEs share nothing in the microbenchmark (no receive-side contention is
    modeled), so a single sending PE is representative.
    """
    traces = {m: run_microbenchmark(N, size, nodes, m, latency, gpus_per_node, source_pes=[0])
              for m in ("put_only", "coupled", "combined")}
    acc = fence_accounting(traces["coupled"])
    return {
        "put_only_ns": traces["put_only"].meta["comm_makespan"],
        "coupled_ns": traces["coupled"].meta["comm_makespan"],
        "combined_ns": traces["combined"].meta["comm_makespan"],
        "efficiency_coupled": signaling_efficiency(traces["coupled"], traces["put_only"]),
        "efficiency_combined": signaling_efficiency(traces["combined"], traces["put_only"]),
        "fence_time_ns": acc.proxy_blocked_total,
        "fence_share": acc.proxy_blocked_total / max(1, traces["coupled"].meta["comm_makespan"]),
        "fence_count": acc.fence_count,
    }


MICRO_N = (1, 2, 4, 8, 16, 32, 64, 96, 128)
MICRO_SIZES = (4 << 10, 16 << 10, 64 << 10, 256 << 10, 1 << 20, 4 << 20)
MICRO_NODES = (2, 4, 8)


def micro_grid(Ns: Sequence[int] = MICRO_N, sizes: Sequence[int] = MICRO_SIZES,
               nodes: Sequence[int] = MICRO_NODES, latency: Optional[LatencyModel] = None) -> dict:
    return {(n, s, nd): micro_point(n, s, nd, latency) for nd in nodes for s in sizes for n in Ns}


# ----------------------------------------------------------------- ablation


@dataclass
class AblationRow:
    protocol: str
    makespan_ns: float
    speedup: float
    fence_count: int
    per_fence_ns: float
    cost_class: str  # "drain" (proxy blocks) or "flag" (NIC-side)


def ablation(model: ModelConfig, nodes: int, S: int, seeds: Sequence[int] = (0,),
             latency: Optional[LatencyModel] = None, skew: float = 0.0,
             gpus_per_node: int = 4, compute: Optional[ComputeModel] = ComputeModel(),
             protocols: Optional[dict] = None) -> list[AblationRow]:
    """Vanilla plus the three optimized configurations on identical workloads.

    Speedups are per-seed ratios averaged over seeds; fence count is per PE.
    """
    protocols = protocols or ABLATION
    cluster = ClusterConfig(nodes, gpus_per_node)
    spans = {name: [] for name in protocols}
    speed = {name: [] for name in protocols}
    fences = {}
    per_fence = {}
    for seed in seeds:
        wl = build_dispatch(model, cluster, S, skew, seed=seed, compute=compute)
        base = None
        for name, proto in protocols.items():
            tr = run_dispatch(proto, wl, latency, seed)
            t = tr.meta["makespan"]
            if name == "vanilla":
                base = t
            spans[name].append(t)
            speed[name].append(1.0 if t == 0 or base in (None, 0) else base / t)
            acc = fence_accounting(tr)
            pes = max(1, cluster.P)
            fences[name] = acc.fence_count // pes
            cost = acc.proxy_blocked_total if proto.ordering == PROXY_FENCE else acc.nic_stall_total
            per_fence[name] = cost / acc.fence_count if acc.fence_count else 0.0
    return [
        AblationRow(name, float(np.mean(spans[name])), float(np.mean(speed[name])), fences[name],
                    per_fence[name], "drain" if protocols[name].ordering == PROXY_FENCE else "flag")
        for name in protocols
    ]


# ------------------------------------------------------------ decomposition


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def group_size_sweep(wl: DispatchWorkload, latency: Optional[LatencyModel] = None,
                     protocol: ProtocolConfig = DECOUPLED_ONLY,
                     sizes: Optional[Iterable[int]] = None) -> dict[int, int]:
    counts = {len(wl.remote_transfers(pe)) for pe in wl.transfers}
    g = reduce(math.gcd, counts)
    if g == 0:
        raise ConfigError("workload has no remote transfers")
    sizes = divisors(g) if sizes is None else list(sizes)
    return {gs: run_dispatch(protocol.with_(group_size=gs), wl, latency).meta["comm_makespan"]
            for gs in sizes}


def find_knee(sweep: dict[int, int], tolerance: float = 0.05) -> int:
    """Smallest group size whose latency is within ``tolerance`` of the best."""
    best = min(sweep.values())
    return min(gs for gs, t in sweep.items() if t <= best * (1 + tolerance))


@dataclass
class DecompositionResult:
    decomposition: Decomposition
    knee: int
    sweep: dict[int, int] = field(default_factory=dict)


def decomposition(model: ModelConfig, nodes: int, S: int,
                  latency: Optional[LatencyModel] = None, gpus_per_node: int = 4,
                  knee: Optional[int] = None) -> DecompositionResult:
    wl = build_dispatch(model, ClusterConfig(nodes, gpus_per_node), S, compute=None)
    sweep = group_size_sweep(wl, latency) if knee is None else {}
    knee = find_knee(sweep) if knee is None else knee
    coupled = run_dispatch(VANILLA, wl, latency)
    gs1 = run_dispatch(DECOUPLED_ONLY.with_(group_size=1), wl, latency)
    at_knee = run_dispatch(DECOUPLED_ONLY.with_(group_size=knee), wl, latency)
    full = run_dispatch(COMBINED.with_(group_size=knee), wl, latency)
    return DecompositionResult(speedup_decomposition(coupled, gs1, at_knee, full), knee, sweep)


# --------------------------------------------------------------- alpha-beta


@dataclass
class FitRow:
    protocol: str
    nodes: int
    alpha_ns: float
    beta_ns_per_byte: float
    r_squared: float
    points: list = field(default_factory=list)
    error: str = ""


def alpha_beta_points(model: ModelConfig, nodes: int, S_values: Sequence[int],
                      protocol: ProtocolConfig, latency: Optional[LatencyModel] = None,
                      gpus_per_node: int = 4) -> list[tuple[int, int]]:
    pts = []
    for S in S_values:
        wl = build_dispatch(model, ClusterConfig(nodes, gpus_per_node), S, compute=None)
        T = run_dispatch(protocol, wl, latency).meta["comm_makespan"]
        pts.append((message_size(S, model.k, model.E, model.H), T))
    return pts


def fit_rows(points: dict[tuple[str, int], list]) -> list[FitRow]:
    rows = []
    for (proto, nodes), pts in sorted(points.items()):
        try:
            f = fit_alpha_beta(pts)
            rows.append(FitRow(proto, nodes, f.alpha, f.beta, f.r_squared, pts))
        except DegenerateFitError as exc:
            rows.append(FitRow(proto, nodes, math.nan, math.nan, math.nan, pts, str(exc)))
    return rows


def alpha_beta_table(model: ModelConfig, nodes_list: Sequence[int], S_values: Sequence[int],
                     protocols: dict[str, ProtocolConfig],
                     latency: Optional[LatencyModel] = None) -> list[FitRow]:
    pts = {(name, n): alpha_beta_points(model, n, S_values, p, latency)
           for name, p in protocols.items() for n in nodes_list}
    return fit_rows(pts)


# --------------------------------------------------------------------- skew


def skew_speedups(model: ModelConfig, nodes: int, S: int, skews: Sequence[float],
                  seeds: Sequence[int] = (0,), latency: Optional[LatencyModel] = None,
                  compute: Optional[ComputeModel] = ComputeModel()) -> dict[float, float]:
    out = {}
    for s in skews:
        ratios = []
        for seed in seeds:
            wl = build_dispatch(model, ClusterConfig(nodes), S, s, seed=seed, compute=compute)
            van = run_dispatch(VANILLA, wl, latency, seed).meta["makespan"]
            comb = run_dispatch(COMBINED, wl, latency, seed).meta["makespan"]
            ratios.append(van / comb)
        out[s] = float(np.mean(ratios))
    return out


# ------------------------------------------------------------ verification


def random_trial(rng: np.random.Generator, protocols: Optional[dict] = None,
                 latency_presets: Optional[Sequence[str]] = None):
    """A small random (workload, protocol, latency) triple."""
    protocols = protocols or SAFE_PROTOCOLS
    E = int(rng.choice([8, 16, 32]))
    P_choices = [(n, g) for n in (2, 3, 4) for g in (1, 2, 4) if E % (n * g) == 0]
    nodes, gpn = P_choices[rng.integers(len(P_choices))]
    k = int(rng.integers(1, min(4, E) + 1))
    H = int(rng.choice([64, 256, 2048]))
    intensity = float(rng.choice([0.5, 4.6, 49.2]))
    model = ModelConfig("rand", H=H, I=H, E=E, k=k, compute_intensity=intensity)
    cluster = ClusterConfig(nodes, gpn, num_qps=int(rng.integers(1, 5)))
    S = int(rng.integers(1, 65))
    skew = float(rng.choice([0.0, 0.0, 0.5, 1.0, 1.5]))
    tile_mode = bool(rng.random() < 0.25)
    compute = ComputeModel(processors_per_pe=int(rng.choice([4, 16, 108]))) if rng.random() < 0.5 else None
    wl = build_dispatch(model, cluster, S, skew, tile_bytes=4096, seed=int(rng.integers(2**31)),
                        tile_mode=tile_mode, compute=compute)
    names = sorted(protocols)
    name = names[rng.integers(len(names))]
    proto = protocols[name]
    counts = [len(wl.remote_transfers(pe)) for pe in wl.transfers]
    g = reduce(math.gcd, counts, 0)
    extra = {"fence_waits_on_signals": bool(rng.random() < 0.8),
             "leader_may_compute": bool(rng.random() < 0.2)}
    if g and rng.random() < 0.5:
        ds = divisors(g)
        extra["group_size"] = ds[rng.integers(len(ds))]
    proto = proto.with_(**extra)
    presets = sorted(latency_presets or LATENCY_PRESETS)
    latency = LATENCY_PRESETS[presets[rng.integers(len(presets))]]
    scope = ("peer", "endpoint", "connection")[rng.integers(3)]
    latency = latency.with_(fence_scope=scope)
    return name, wl, proto, latency


@dataclass
class VerifyReport:
    trials: int = 0
    violating_trials: int = 0
    violations: int = 0
    examples: list = field(default_factory=list)


def verify_safe(trials: int, seed: int = 0, start: int = 0) -> VerifyReport:
    rep = VerifyReport()
    for i in range(start, start + trials):
        rng = np.random.default_rng([seed, i])
        name, wl, proto, lat = random_trial(rng)
        v = verify_ordering(run_dispatch(proto, wl, lat, seed))
        rep.trials += 1
        if v:
            rep.violating_trials += 1
            rep.violations += len(v)
            if len(rep.examples) < 5:
                rep.examples.append((i, name, str(v[0])))
    return rep


# Latency models under which dropping fences can reorder delivery. The
# single-lane "ideal" model puts every request on one FIFO wire, so
# nothing can overtake and there is no violation to detect.
REORDERING_PRESETS = ("slingshot-like", "ibrc-like")


def verify_fault_injected(trials: int, seed: int = 0, start: int = 0) -> VerifyReport:
    """Vanilla with fences removed; a sensitive checker flags nearly every trial."""
    rep = VerifyReport()
    broken = {"vanilla": VANILLA.with_(drop_fences=True)}
    for i in range(start, start + trials):
        rng = np.random.default_rng([seed, i, 1])
        name, wl, proto, lat = random_trial(rng, broken, REORDERING_PRESETS)
        v = verify_ordering(run_dispatch(proto, wl, lat, seed))
        rep.trials += 1
        if v:
            rep.violating_trials += 1
            rep.violations += len(v)
    return rep


def qp_bug_scenario(latency: Optional[LatencyModel] = None) -> dict[str, int]:
    """Violations for NIC-side ordering with round-robin vs peer-hash QP selection."""
    wl = ordering_bug_workload()
    out = {}
    for policy in ("round_robin", "peer_hash"):
        tr = run_dispatch(NIC_ORDER_ONLY.with_(qp_policy=policy), wl, latency)
        out[policy] = len(verify_ordering(tr))
    return out
