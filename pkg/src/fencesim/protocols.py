"""Signaling protocols: coupled put+signal, decoupled (grouped) signaling,
NIC-side ordering and the combination of both.

Each PE runs ``processors_per_pe`` virtual CTAs. Send tasks (one per
transfer) are dealt to CTAs round-robin; a CTA runs its tasks as a small
program, then becomes free for receive-side compute. Programs are Python
generators yielding ``("sleep", ns)`` or ``("wait", group)``.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

from .sim import ConfigError, ModelError, Simulator
from .trace import RunTrace
from .transport import (FENCE, NIC_FENCE, PEER_HASH, PROXY_FENCE, PUT, ROUND_ROBIN, SIGNAL,
                        LatencyModel, Transport, WorkRequest, latency_preset)
from .workload import (ClusterConfig, ComputeModel, DispatchWorkload, ModelConfig, Transfer,
                       microbenchmark_workload)

COUPLED = "coupled"
DECOUPLED = "decoupled"
PUT_ONLY = "none"  # Puts only, no fences or signals

PROXY = "proxy"
GPU_DIRECT = "gpu_direct"


@dataclass(frozen=True)
class ProtocolConfig:
    signaling: str = COUPLED
    ordering: str = PROXY_FENCE
    group_size: Optional[int] = None  # None: one group per remote PE
    transport: str = PROXY
    qp_policy: str = PEER_HASH
    fence_waits_on_signals: bool = True
    leader_may_compute: bool = False
    drop_fences: bool = False  # fault injection: vanilla without fences
    issue_cost_ns: int = 200
    gpu_direct_issue_cost_ns: int = 300
    nvlink_latency_ns: int = 1000

    def __post_init__(self):
        if self.signaling not in (COUPLED, DECOUPLED, PUT_ONLY):
            raise ConfigError(f"unknown signaling {self.signaling!r}")
        if self.ordering not in (PROXY_FENCE, NIC_FENCE):
            raise ConfigError(f"unknown ordering {self.ordering!r}")
        if self.transport not in (PROXY, GPU_DIRECT):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.qp_policy not in (PEER_HASH, ROUND_ROBIN):
            raise ConfigError(f"unknown qp_policy {self.qp_policy!r}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        for name in ("issue_cost_ns", "gpu_direct_issue_cost_ns", "nvlink_latency_ns"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def label(self) -> str:
        if self.transport == GPU_DIRECT:
            return f"gpu_direct-{self.signaling}"
        if self.signaling == PUT_ONLY:
            return "put_only"
        names = {
            (COUPLED, PROXY_FENCE): "vanilla",
            (DECOUPLED, PROXY_FENCE): "decoupled",
            (COUPLED, NIC_FENCE): "nic_order",
            (DECOUPLED, NIC_FENCE): "combined",
        }
        return names[(self.signaling, self.ordering)]

    @property
    def unsafe(self) -> bool:
        """NIC fence flags only order within one connection; round-robin QPs break that."""
        return (self.drop_fences
                or (self.ordering == NIC_FENCE and self.qp_policy == ROUND_ROBIN
                    and self.transport == PROXY and self.signaling != PUT_ONLY))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **kw) -> "ProtocolConfig":
        d = self.to_dict()
        d.update(kw)
        return ProtocolConfig(**d)


VANILLA = ProtocolConfig(COUPLED, PROXY_FENCE)
DECOUPLED_ONLY = ProtocolConfig(DECOUPLED, PROXY_FENCE)
NIC_ORDER_ONLY = ProtocolConfig(COUPLED, NIC_FENCE)
COMBINED = ProtocolConfig(DECOUPLED, NIC_FENCE)
PUT_ONLY_PROTOCOL = ProtocolConfig(PUT_ONLY, PROXY_FENCE)

PROTOCOL_PRESETS = {
    "vanilla": VANILLA,
    "decoupled": DECOUPLED_ONLY,
    "nic_order": NIC_ORDER_ONLY,
    "combined": COMBINED,
    "put_only": PUT_ONLY_PROTOCOL,
    "gpu_direct": ProtocolConfig(COUPLED, PROXY_FENCE, transport=GPU_DIRECT),
}

# every mode that must never produce an ordering violation
SAFE_PROTOCOLS = {
    "vanilla": VANILLA,
    "decoupled": DECOUPLED_ONLY,
    "nic_order": NIC_ORDER_ONLY,
    "combined": COMBINED,
    "gpu_direct": ProtocolConfig(COUPLED, PROXY_FENCE, transport=GPU_DIRECT),
    "gpu_direct_decoupled": ProtocolConfig(DECOUPLED, PROXY_FENCE, transport=GPU_DIRECT),
}


def micro_protocol(mode: str) -> ProtocolConfig:
    return {"put_only": PUT_ONLY_PROTOCOL, "coupled": VANILLA, "combined": COMBINED}[mode]


@dataclass
class SignalGroup:
    group_id: int
    members: list[Transfer]
    leader_cta: int = -1
    counter: int = 0
    done: set = field(default_factory=set)
    waiters: list = field(default_factory=list)
    phase2_done: bool = False

    @property
    def target(self) -> int:
        return len(self.members)

    @property
    def dst_pes(self) -> list[int]:
        return sorted({m.dst for m in self.members})


def assign_groups(remote: list[Transfer], group_size: Optional[int] = None) -> list[SignalGroup]:
    """Group remote transfers in (dst_pe, expert) order.

    With ``group_size=None`` each group holds the transfers bound for one
    remote PE; these may differ in size when routing is skewed. An explicit
    ``group_size`` must divide the number of remote transfers.
    """
    members = sorted(remote, key=lambda t: (t.dst, t.expert, t.tile))
    if not members:
        return []
    if group_size is None:
        groups: list[SignalGroup] = []
        for t in members:
            if not groups or groups[-1].members[0].dst != t.dst:
                groups.append(SignalGroup(len(groups), []))
            groups[-1].members.append(t)
        return groups
    n = len(members)
    if n % group_size != 0:
        raise ConfigError(f"group_size {group_size} does not divide {n} remote transfers")
    return [SignalGroup(g, members[g * group_size:(g + 1) * group_size]) for g in range(n // group_size)]


@dataclass
class _PEState:
    pe: int
    free_ctas: deque = field(default_factory=deque)
    ready: deque = field(default_factory=deque)  # (req_id, tag, chunk bytes)
    computing: int = 0


class Dispatcher:
    """Runs one dispatch of ``workload`` under ``protocol``."""

    def __init__(self, protocol: ProtocolConfig, workload: DispatchWorkload,
                 latency: Optional[LatencyModel] = None, seed: int = 0):
        self.protocol = protocol
        self.workload = workload
        self.latency = latency if latency is not None else latency_preset("slingshot-like")
        self.sim = Simulator(seed)
        self.trace = RunTrace()
        self.transport = Transport(
            self.sim, self.latency, self.trace,
            ordering=protocol.ordering,
            qp_policy=protocol.qp_policy,
            num_qps=workload.cluster.num_qps,
            fence_waits_on_signals=protocol.fence_waits_on_signals,
            gpu_direct=protocol.transport == GPU_DIRECT,
            on_signal=self._on_signal,
            peers_per_pe=len(workload.cluster.remote_pes(0)),
        )
        self.compute: Optional[ComputeModel] = workload.compute
        self.W = self.compute.processors_per_pe if self.compute else 108
        self.groups: dict[int, list[SignalGroup]] = {}
        self.group_of: dict[str, SignalGroup] = {}
        self.by_tag: dict[str, Transfer] = {}
        self.pes: dict[int, _PEState] = {}
        self.fences_submitted = 0
        self.flagged_signals = 0

    # ----------------------------------------------------------- submission

    @property
    def _direct(self) -> bool:
        return self.protocol.transport == GPU_DIRECT

    def _extra_issue(self) -> int:
        return self.protocol.gpu_direct_issue_cost_ns if self._direct else 0

    def _submit(self, kind: str, t: Transfer, group_id: int = -1) -> WorkRequest:
        tr = self.transport
        size = t.size if kind == PUT else 0
        req = tr.new_request(kind, t.src, t.dst, size, tag=t.tag if kind != FENCE else "",
                             group_id=group_id)
        if self._direct:
            tr.direct_submit(req)
        else:
            tr.proxy_submit(tr.channel(t.src), req)
        return req

    def _submit_fence(self, src: int, dst: int, group_id: int = -1) -> None:
        if self._direct or self.protocol.drop_fences:
            return
        tr = self.transport
        req = tr.new_request(FENCE, src, dst, group_id=group_id)
        tr.proxy_submit(tr.channel(src), req)
        self.fences_submitted += 1

    def coupled_put_signal(self, cta: int, t: Transfer) -> None:
        """Put, fence, signal as three consecutive FIFO entries."""
        if not t.remote:
            raise ModelError("intra-node transfers do not use the proxy")
        self._submit(PUT, t)
        if self.protocol.signaling == PUT_ONLY:
            return
        self._submit_fence(t.src, t.dst)
        if not self._direct:
            self._submit(SIGNAL, t)

    def decoupled_phase1(self, cta: int, t: Transfer, group: SignalGroup) -> None:
        if t.tag in group.done:
            raise ModelError(f"duplicate phase-1 for {t.tag}")
        if group.counter >= group.target:
            raise ModelError(f"group {group.group_id} counter overflow")
        self._submit(PUT, t, group.group_id)
        group.done.add(t.tag)
        group.counter += 1
        if group.counter == group.target:
            waiters, group.waiters = group.waiters, []
            for wake in waiters:
                self.sim.schedule(self.sim.now, wake)

    def decoupled_phase2(self, cta: int, group: SignalGroup) -> Iterator:
        """One fence then one signal per member; yields sleeps for GPU-direct issue cost."""
        if cta != group.leader_cta:
            raise ModelError(f"CTA {cta} is not the leader of group {group.group_id}")
        if group.counter != group.target:
            raise ModelError(f"group {group.group_id} phase 2 before all puts were issued")
        if group.phase2_done:
            raise ModelError(f"group {group.group_id} phase 2 issued twice")
        group.phase2_done = True
        first = group.members[0]
        per_peer = self.protocol.ordering == NIC_FENCE
        if not per_peer:
            self._submit_fence(first.src, first.dst, group.group_id)
        seen: set[int] = set()
        for m in group.members:
            # a NIC fence flag only orders against the flagged signal's own peer
            if per_peer and m.dst not in seen:
                seen.add(m.dst)
                self._submit_fence(m.src, m.dst, group.group_id)
            if self._direct:
                yield ("sleep", self._extra_issue())
            self._submit(SIGNAL, m, group.group_id)

    def _local(self, t: Transfer) -> None:
        self.transport.nvlink_put_signal(t.src, t.dst, t.size, t.tag,
                                         self.protocol.nvlink_latency_ns)

    # ------------------------------------------------------------- programs

    def _program(self, pe: int, cta: int, tasks: list[Transfer], leads: list[SignalGroup]):
        p = self.protocol
        stage = p.issue_cost_ns + self._extra_issue()
        decoupled = p.signaling == DECOUPLED
        for t in tasks:
            yield ("sleep", stage)
            if not t.remote:
                self._local(t)
            elif decoupled:
                self.decoupled_phase1(cta, t, self.group_of[t.tag])
            else:
                self.coupled_put_signal(cta, t)
                if self._direct and p.signaling != PUT_ONLY:
                    yield ("sleep", self._extra_issue())
                    self._submit(SIGNAL, t)
        if decoupled and not p.leader_may_compute and leads:
            # the leader reaches its wait in a later step than its own Put
            yield ("sleep", 0)
            for g in leads:
                if g.counter < g.target:
                    yield ("wait", g)
                yield from self.decoupled_phase2(cta, g)

    def _run_program(self, pe: int, cta: int, gen) -> None:
        try:
            cmd = next(gen)
        except StopIteration:
            self._cta_free(pe, cta)
            return
        if cmd[0] == "sleep":
            self.sim.after(cmd[1], (self._run_program, pe, cta, gen))
        else:
            group: SignalGroup = cmd[1]
            group.waiters.append((self._run_program, pe, cta, gen))

    def _detached_phase2(self, pe: int, group: SignalGroup) -> None:
        gen = self.decoupled_phase2(group.leader_cta, group)
        self._drive_detached(gen)

    def _drive_detached(self, gen) -> None:
        for cmd in gen:
            if cmd[1]:
                self.sim.after(cmd[1], (self._drive_detached, gen))
                return

    # -------------------------------------------------------------- compute

    def _on_signal(self, req: WorkRequest, now: int) -> None:
        if self.compute is None or self.workload.model.compute_intensity is None:
            return
        t = self.by_tag.get(req.tag)
        if t is None:
            return
        st = self.pes[req.dst_pe]
        for nbytes in self.compute.chunks(t.size):
            st.ready.append((req.req_id, req.tag, nbytes))
        self._dispatch_compute(st)

    def _cta_free(self, pe: int, cta: int) -> None:
        st = self.pes[pe]
        st.free_ctas.append(cta)
        self._dispatch_compute(st)

    def _dispatch_compute(self, st: _PEState) -> None:
        intensity = self.workload.model.compute_intensity
        while st.ready and st.free_ctas:
            cta = st.free_ctas.popleft()
            req_id, tag, nbytes = st.ready.popleft()
            dur = self.compute.compute_ns(nbytes, intensity)
            now = self.sim.now
            self.trace.add(now, st.pe, "compute_start", req=req_id, dst=st.pe, qp=cta,
                           size=nbytes, tag=tag)
            self.sim.schedule(now + dur, (self._compute_end, st, cta, req_id, tag, nbytes))

    def _compute_end(self, st: _PEState, cta: int, req_id: int, tag: str, nbytes: int) -> None:
        self.trace.add(self.sim.now, st.pe, "compute_end", req=req_id, dst=st.pe, qp=cta,
                       size=nbytes, tag=tag)
        st.free_ctas.append(cta)
        self._dispatch_compute(st)

    # ------------------------------------------------------------------ run

    def setup(self) -> None:
        wl = self.workload
        p = self.protocol
        P = wl.cluster.P
        for pe in range(P):
            self.pes[pe] = _PEState(pe)
        for pe, transfers in sorted(wl.transfers.items()):
            for t in transfers:
                self.by_tag[t.tag] = t
            if p.signaling == DECOUPLED:
                groups = assign_groups(wl.remote_transfers(pe), p.group_size)
            else:
                groups = []
            self.groups[pe] = groups
            for g in groups:
                for m in g.members:
                    self.group_of[m.tag] = g
            # deal tasks to CTAs round-robin in (dst, expert) order
            tasks = sorted(transfers, key=lambda t: (t.dst, t.expert, t.tile))
            cta_tasks: dict[int, list[Transfer]] = {}
            cta_of: dict[str, int] = {}
            for i, t in enumerate(tasks):
                c = i % self.W
                cta_tasks.setdefault(c, []).append(t)
                cta_of[t.tag] = c
            leads: dict[int, list[SignalGroup]] = {}
            for g in groups:
                g.leader_cta = cta_of[g.members[0].tag]
                leads.setdefault(g.leader_cta, []).append(g)
                if p.leader_may_compute:
                    g.waiters.append((self._detached_phase2, pe, g))
            busy = set(cta_tasks)
            for c in range(self.W):
                if c not in busy:
                    self.pes[pe].free_ctas.append(c)
            for c in sorted(cta_tasks):
                gen = self._program(pe, c, cta_tasks[c], leads.get(c, []))
                self.sim.schedule(0, (self._run_program, pe, c, gen))

    def run(self) -> RunTrace:
        self.setup()
        self.sim.run_until_idle()
        self._finish()
        return self.trace

    def _finish(self) -> None:
        for pe, groups in self.groups.items():
            for g in groups:
                if not g.phase2_done:
                    raise ModelError(f"group {g.group_id} on PE {pe} never signaled")
        recs = self.trace.records
        comm = max((r.time for r in recs if r.kind in ("completion", "signal_visible")), default=0)
        end = max((r.time for r in recs), default=0)
        tr = self.transport
        self.trace.meta.update({
            "protocol": self.protocol.label,
            "seed": self.sim.seed,
            "comm_makespan": comm,
            "makespan": end,
            "fences": self.fences_submitted,
            "groups": sum(len(g) for g in self.groups.values()),
            "put_bytes": tr.put_bytes_submitted,
            "heap_digest": tr.heap.digest(),
            "pes": self.workload.cluster.P,
            "workload_digest": workload_digest(self.workload),
            "latency": asdict(self.latency),
        })


def workload_digest(workload: DispatchWorkload) -> str:
    h = hashlib.sha256()
    for item in workload.geometry():
        h.update(repr(item).encode())
    return h.hexdigest()[:16]


def run_dispatch(protocol: ProtocolConfig, workload: DispatchWorkload,
                 latency: Optional[LatencyModel] = None, seed: int = 0) -> RunTrace:
    return Dispatcher(protocol, workload, latency, seed).run()


def three_put_workload() -> DispatchWorkload:
    """Three transfers from PE 0 to one remote PE over a single QP."""
    cluster = ClusterConfig(nodes=2, gpus_per_node=1, num_qps=1)
    model = ModelConfig("three-put", H=2048, I=1, E=3, k=1)
    ts = [Transfer(0, 1, e, 4096, 0) for e in range(3)]
    return DispatchWorkload(model, cluster, S=0, transfers={0: ts}, compute=None)


def three_put_protocols() -> dict[str, ProtocolConfig]:
    return {
        "vanilla": VANILLA,
        "decoupled": DECOUPLED_ONLY.with_(group_size=3),
        "nic_order": NIC_ORDER_ONLY,
        "combined": COMBINED.with_(group_size=3),
    }


def ordering_bug_workload(size: int = 1 << 20) -> DispatchWorkload:
    """One large Put and its Signal from PE 0 to PE 1 with two QPs available."""
    cluster = ClusterConfig(nodes=2, gpus_per_node=1, num_qps=2)
    model = ModelConfig("qp-bug", H=max(1, size // 2), I=1, E=1, k=1)
    return DispatchWorkload(model, cluster, S=0, transfers={0: [Transfer(0, 1, 0, size, 0)]},
                            compute=None)


def run_microbenchmark(N: int, size: int, nodes: int, mode: str,
                       latency: Optional[LatencyModel] = None, gpus_per_node: int = 4,
                       source_pes=None, seed: int = 0) -> RunTrace:
    wl = microbenchmark_workload(N, size, nodes, mode, gpus_per_node, source_pes)
    return run_dispatch(micro_protocol(mode), wl, latency, seed)
