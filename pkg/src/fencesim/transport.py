"""Proxy submission path and NIC ordering model.

GPU threads append work requests to one host FIFO per PE; a single proxy
drains it in order into the NIC. Ordering between a Put and its Signal is
enforced either by the proxy (a FenceMarker blocks the drain until every
outstanding request has completed) or by the NIC (the next Signal carries a
fence flag and is held at the head of its connection until everything ahead
of it on that connection has completed).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .sim import ConfigError, ModelError, Simulator
from .trace import Record, RunTrace

PUT = "put"
SIGNAL = "signal"
FENCE = "fence"

SIGNAL_BYTES = 8

_new_record = tuple.__new__  # skips the NamedTuple constructor on the hot path

PROXY_FENCE = "proxy_fence"
NIC_FENCE = "nic_fence"

ROUND_ROBIN = "round_robin"
PEER_HASH = "peer_hash"

FENCE_SCOPES = ("peer", "endpoint", "connection")


@dataclass(slots=True)
class WorkRequest:
    kind: str
    src_pe: int
    dst_pe: int
    size: int = 0
    fence_flag: bool = False
    group_id: int = -1
    tag: str = ""
    submit_seq: int = 0
    req_id: int = -1
    qp: int = -1
    path: str = "proxy"

    def __post_init__(self):
        if self.kind not in (PUT, SIGNAL, FENCE):
            raise ModelError(f"unknown request kind {self.kind!r}")
        if self.kind == FENCE:
            if self.fence_flag:
                raise ModelError("a FenceMarker never carries the NIC fence flag")
            self.size = 0
        elif self.kind == SIGNAL and self.size == 0:
            self.size = SIGNAL_BYTES


@dataclass(frozen=True)
class LatencyModel:
    """Timing parameters for one transport, all times in ns.

    ``egress_lanes`` splits the link into that many equal transfer engines:
    a lone transfer runs at ``bandwidth / egress_lanes`` while concurrent
    transfers fill the whole link.

    ``tail_scope`` picks where the destination-count term
    ``base_rtt * c * D`` is charged: ``"drain"`` adds it when a proxy fence
    collects completions (D = remote peers the endpoint is connected to,
    minus one); ``"request"`` adds it to every request at service start (D =
    distinct destinations with requests in flight from the sender, minus
    one).

    ``fence_scope`` is the reach of a NIC fence flag. ``"peer"``: one
    pipeline per QP index shared by all peers, and a flagged request waits
    for earlier requests to its own peer while holding up everything behind
    it (libfabric ``FI_FENCE``). ``"endpoint"``: same pipeline, but the flag
    waits for every earlier request. ``"connection"``: one pipeline per peer
    and QP index (verbs RC).
    """

    base_rtt_ns: int = 2000
    bandwidth: float = 25.0  # bytes / ns
    completion_tail_coeff: float = 1.2
    per_request_nic_service_ns: int = 100
    proxy_poll_quantum_ns: int = 500
    egress_lanes: int = 2
    tail_scope: str = "drain"
    fence_scope: str = "peer"
    ordered_completion: bool = False

    def __post_init__(self):
        for name in ("base_rtt_ns", "completion_tail_coeff",
                     "per_request_nic_service_ns", "proxy_poll_quantum_ns"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be > 0")
        if self.egress_lanes < 1:
            raise ConfigError("egress_lanes must be >= 1")
        if self.tail_scope not in ("drain", "request"):
            raise ConfigError(f"tail_scope must be 'drain' or 'request', got {self.tail_scope!r}")
        if self.fence_scope not in FENCE_SCOPES:
            raise ConfigError(f"fence_scope must be one of {FENCE_SCOPES}, got {self.fence_scope!r}")

    @property
    def lane_bandwidth(self) -> float:
        return self.bandwidth / self.egress_lanes

    def with_(self, **kw) -> "LatencyModel":
        return replace(self, **kw)


# Calibrated so that, at 96 concurrent 4 KB transfers, aggregate proxy-fence
# time goes from ~0.96 ms at 2 nodes to ~6.5 ms at 8 nodes.
LATENCY_PRESETS: dict[str, LatencyModel] = {
    "slingshot-like": LatencyModel(),
    "ibrc-like": LatencyModel(
        base_rtt_ns=1500,
        bandwidth=50.0,
        completion_tail_coeff=0.15,
        fence_scope="connection",
    ),
    "ideal": LatencyModel(
        base_rtt_ns=3000,
        completion_tail_coeff=0.0,
        egress_lanes=1,
        tail_scope="request",
        fence_scope="connection",
    ),
}


def latency_preset(name: str) -> LatencyModel:
    try:
        return LATENCY_PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown latency preset {name!r}; choose from {sorted(LATENCY_PRESETS)}"
        ) from None


def transfer_completion_time(size: int, dest_count: int, base_rtt_ns: float,
                             tail_coeff: float, bandwidth: float) -> int:
    """Latency from wire start to completion: ``base_rtt*(1+c*D) + size/bw``, floored."""
    return int(math.floor(base_rtt_ns * (1.0 + tail_coeff * dest_count) + size / bandwidth))


def select_qp(policy: str, peer: int, num_qps: int, channel: Optional["ProxyChannel"] = None) -> int:
    if num_qps < 1:
        raise ConfigError("num_qps must be >= 1")
    if policy == PEER_HASH:
        return peer % num_qps
    if policy == ROUND_ROBIN:
        if channel is None:
            raise ConfigError("round-robin QP selection needs channel state")
        qp = channel.rr_counter % num_qps
        channel.rr_counter += 1
        return qp
    raise ConfigError(f"unknown QP policy {policy!r}")


@dataclass
class ProxyChannel:
    pe: int
    fifo: deque = field(default_factory=deque)
    outstanding: int = 0  # requests counted by the fence (see fence_waits_on_signals)
    outstanding_puts: int = 0
    pending_fence: bool = False
    blocked: bool = False
    block_start: int = 0
    release_scheduled: bool = False
    kick_scheduled: bool = False
    next_seq: int = 0
    rr_counter: int = 0
    open_peers: set = field(default_factory=set)
    drain_blocked_total: int = 0
    drain_durations: list = field(default_factory=list)
    forwarded: list = field(default_factory=list)  # req ids handed to the NIC, in order


@dataclass
class NicConnection:
    key: tuple  # (local PE, remote PE or -1 for endpoint scope, qp index)
    pipeline: deque = field(default_factory=deque)
    in_flight: dict = field(default_factory=dict)  # req_id -> completion time
    in_flight_by_dst: dict = field(default_factory=dict)  # remote PE -> count
    blocked_head: bool = False
    last_completion: int = 0
    stall_episodes: int = 0


@dataclass
class SymmetricHeap:
    """Per-PE data regions and signal flag words.

    A region is named by ``(pe, tag)``; the tag plays the role of the
    symmetric offset, identical on every PE.
    """

    regions: dict = field(default_factory=dict)  # (pe, tag) -> (bytes, written_at)
    flags: dict = field(default_factory=dict)  # (pe, flag) -> visible_time
    waiters: dict = field(default_factory=dict)  # (pe, flag) -> [callback(time)]
    bytes_written: int = 0

    def write(self, pe: int, tag: str, size: int, time: int) -> None:
        key = (pe, tag)
        prev = self.regions.get(key)
        total = size if prev is None else prev[0] + size
        self.regions[key] = (total, max(time, prev[1]) if prev else time)
        self.bytes_written += size

    def wait(self, pe: int, flag: str, callback: Callable[[int], None]) -> None:
        t = self.flags.get((pe, flag))
        if t is not None:
            callback(t)
        else:
            self.waiters.setdefault((pe, flag), []).append(callback)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for (pe, tag), (nbytes, _) in sorted(self.regions.items()):
            h.update(f"R{pe}|{tag}|{nbytes}\n".encode())
        for pe, flag in sorted(self.flags):
            h.update(f"F{pe}|{flag}\n".encode())
        return h.hexdigest()


def deliver_signal(heap: SymmetricHeap, pe: int, flag: str, time: int) -> None:
    key = (pe, flag)
    prev = heap.flags.get(key)
    if prev is not None and time < prev:
        raise ModelError(f"flag {flag!r} on PE {pe} set at {time} after being visible at {prev}")
    heap.flags[key] = time
    for cb in heap.waiters.pop(key, ()):
        cb(time)


class Transport:
    """All proxies and NICs of one simulated run."""

    def __init__(
        self,
        sim: Simulator,
        latency: LatencyModel,
        trace: RunTrace,
        heap: Optional[SymmetricHeap] = None,
        *,
        ordering: str = PROXY_FENCE,
        qp_policy: str = PEER_HASH,
        num_qps: int = 1,
        fence_waits_on_signals: bool = True,
        gpu_direct: bool = False,
        on_signal: Optional[Callable[[WorkRequest, int], None]] = None,
        peers_per_pe: Optional[int] = None,
    ):
        if ordering not in (PROXY_FENCE, NIC_FENCE):
            raise ConfigError(f"unknown ordering mode {ordering!r}")
        if num_qps < 1:
            raise ConfigError("num_qps must be >= 1")
        if gpu_direct:
            # in-QP ordering, one RC connection per peer
            latency = latency.with_(fence_scope="connection", ordered_completion=True)
        self.sim = sim
        self.lat = latency
        self.trace = trace
        self.heap = heap if heap is not None else SymmetricHeap()
        self.ordering = ordering
        self.qp_policy = qp_policy
        self.num_qps = num_qps
        self.fence_waits_on_signals = fence_waits_on_signals
        self.gpu_direct = gpu_direct
        self.on_signal = on_signal
        self.peers_per_pe = peers_per_pe
        self._lane_bw = latency.lane_bandwidth
        self._per_request_tail = latency.tail_scope == "request"
        self.channels: dict[int, ProxyChannel] = {}
        self.connections: dict[tuple, NicConnection] = {}
        self._lanes: dict[int, list[float]] = {}
        self._inflight_dst: dict[int, dict[int, int]] = {}
        self._reqs: dict[int, WorkRequest] = {}
        self._next_req = 0
        self.put_bytes_submitted = 0
        self.puts_submitted = 0
        self.puts_completed = 0

    # ------------------------------------------------------------------ ids

    def new_request(self, kind: str, src: int, dst: int, size: int = 0, **kw) -> WorkRequest:
        req = WorkRequest(kind, src, dst, size, **kw)
        req.req_id = self._next_req
        self._next_req += 1
        self._reqs[req.req_id] = req
        return req

    def channel(self, pe: int) -> ProxyChannel:
        ch = self.channels.get(pe)
        if ch is None:
            ch = self.channels[pe] = ProxyChannel(pe)
        return ch

    # ---------------------------------------------------------------- proxy

    def proxy_submit(self, channel: ProxyChannel, req: WorkRequest) -> int:
        if req.src_pe != channel.pe:
            raise ModelError(f"PE {req.src_pe} cannot submit on the channel of PE {channel.pe}")
        channel.next_seq += 1
        req.submit_seq = channel.next_seq
        req.path = "proxy"
        channel.fifo.append(req)
        if req.kind == PUT:
            self.puts_submitted += 1
            self.put_bytes_submitted += req.size
        self._trace_req(self.sim.now, req.src_pe, "submit", req)
        if not channel.kick_scheduled and not channel.blocked:
            channel.kick_scheduled = True
            self.sim.schedule(self.sim.now, (self._kick, channel))
        return req.submit_seq

    def _kick(self, channel: ProxyChannel) -> None:
        channel.kick_scheduled = False
        self.proxy_run(channel)

    def proxy_run(self, channel: ProxyChannel) -> None:
        while channel.fifo and not channel.blocked:
            self.proxy_drain_step(channel)

    def proxy_drain_step(self, channel: ProxyChannel) -> str:
        """Handle the FIFO head once; returns a short description of the action."""
        if not channel.fifo:
            raise ModelError("drain step on an empty FIFO")
        if channel.blocked:
            raise ModelError("drain step while the proxy is blocked on a fence")
        head: WorkRequest = channel.fifo[0]
        if head.kind == FENCE:
            if self.ordering == NIC_FENCE:
                channel.fifo.popleft()
                channel.pending_fence = True
                return "fence-deferred"
            if channel.outstanding > 0:
                channel.blocked = True
                channel.block_start = self.sim.now
                self.trace.add(self.sim.now, channel.pe, "proxy_block_begin", req=head.req_id,
                               rkind=FENCE, src=channel.pe)
                return "fence-block"
            channel.fifo.popleft()
            return "fence-pass"
        channel.fifo.popleft()
        if head.kind == SIGNAL and channel.pending_fence:
            head.fence_flag = True
            channel.pending_fence = False
        channel.open_peers.add(head.dst_pe)
        head.qp = select_qp(self.qp_policy, head.dst_pe, self.num_qps, channel)
        if head.kind == PUT or self.fence_waits_on_signals:
            channel.outstanding += 1
        if head.kind == PUT:
            channel.outstanding_puts += 1
        channel.forwarded.append(head.req_id)
        self.nic_submit(self.connection_for(head), head)
        return "forward"

    def _maybe_release(self, channel: ProxyChannel) -> None:
        if not channel.blocked or channel.outstanding > 0 or channel.release_scheduled:
            return
        now = self.sim.now
        release = now
        if self.lat.tail_scope == "drain":
            peers = self.peers_per_pe if self.peers_per_pe is not None else len(channel.open_peers)
            d = max(peers - 1, 0)
            release += int(math.floor(self.lat.base_rtt_ns * self.lat.completion_tail_coeff * d))
        q = self.lat.proxy_poll_quantum_ns
        if q > 0:
            waited = release - channel.block_start
            release = channel.block_start + -(-waited // q) * q
        channel.release_scheduled = True
        self.sim.schedule(release, (self._release, channel))

    def _release(self, channel: ProxyChannel) -> None:
        now = self.sim.now
        fence = channel.fifo.popleft()
        assert fence.kind == FENCE
        dur = now - channel.block_start
        channel.drain_blocked_total += dur
        channel.drain_durations.append(dur)
        channel.blocked = False
        channel.release_scheduled = False
        self.trace.add(now, channel.pe, "proxy_block_end", req=fence.req_id, rkind=FENCE,
                       src=channel.pe, size=dur)
        self.proxy_run(channel)

    # ------------------------------------------------------------------ NIC

    def connection_for(self, req: WorkRequest) -> NicConnection:
        remote = req.dst_pe if self.lat.fence_scope == "connection" else -1
        key = (req.src_pe, remote, req.qp)
        conn = self.connections.get(key)
        if conn is None:
            conn = self.connections[key] = NicConnection(key)
        return conn

    def direct_submit(self, req: WorkRequest) -> None:
        """GPU-direct path: the issuing thread posts straight to the NIC."""
        req.path = "direct"
        req.qp = select_qp(PEER_HASH, req.dst_pe, self.num_qps)
        if req.kind == PUT:
            self.puts_submitted += 1
            self.put_bytes_submitted += req.size
        self._trace_req(self.sim.now, req.src_pe, "submit", req)
        self.nic_submit(self.connection_for(req), req)

    def nic_submit(self, conn: NicConnection, req: WorkRequest) -> None:
        conn.pipeline.append(req)
        self.nic_advance(conn)

    def nic_advance(self, conn: NicConnection) -> None:
        now = self.sim.now
        while conn.pipeline:
            head: WorkRequest = conn.pipeline[0]
            if head.fence_flag and self._fence_must_wait(conn, head):
                if not conn.blocked_head:
                    conn.blocked_head = True
                    conn.stall_episodes += 1
                    self.trace.add(now, head.src_pe, "nic_block_begin", req=head.req_id,
                                   rkind=head.kind, src=head.src_pe, dst=head.dst_pe,
                                   qp=head.qp, tag=head.tag, flag=1, path=head.path)
                return
            conn.pipeline.popleft()
            if conn.blocked_head:
                conn.blocked_head = False
                self.trace.add(now, head.src_pe, "nic_block_end", req=head.req_id,
                               rkind=head.kind, src=head.src_pe, dst=head.dst_pe,
                               qp=head.qp, tag=head.tag, flag=1, path=head.path)
            self._start_service(conn, head)

    def _fence_must_wait(self, conn: NicConnection, head: WorkRequest) -> bool:
        if self.lat.fence_scope == "peer":
            return conn.in_flight_by_dst.get(head.dst_pe, 0) > 0
        return bool(conn.in_flight)

    def _start_service(self, conn: NicConnection, req: WorkRequest) -> None:
        now = self.sim.now
        lat = self.lat
        self._trace_req(now, req.src_pe, "nic_service_start", req)
        inflight = self._inflight_dst.setdefault(req.src_pe, {})
        inflight[req.dst_pe] = inflight.get(req.dst_pe, 0) + 1
        lanes = self._lanes.get(req.src_pe)
        if lanes is None:
            lanes = self._lanes[req.src_pe] = [0.0] * lat.egress_lanes
        ready = now + lat.per_request_nic_service_ns
        free = min(lanes)
        lane = lanes.index(free)
        wire_start = free if free > ready else float(ready)
        bw = self._lane_bw
        lanes[lane] = wire_start + req.size / bw
        if self._per_request_tail:
            done = int(math.floor(wire_start)) + transfer_completion_time(
                req.size, len(inflight) - 1, lat.base_rtt_ns, lat.completion_tail_coeff, bw)
        else:
            # D = 0, so the tail term drops out
            done = int(math.floor(wire_start)) + int(math.floor(lat.base_rtt_ns + req.size / bw))
        if lat.ordered_completion:
            done = max(done, conn.last_completion)
        conn.last_completion = max(conn.last_completion, done)
        conn.in_flight[req.req_id] = done
        conn.in_flight_by_dst[req.dst_pe] = conn.in_flight_by_dst.get(req.dst_pe, 0) + 1
        self.sim.schedule(done, (self._complete, conn, req))

    def _complete(self, conn: NicConnection, req: WorkRequest) -> None:
        now = self.sim.now
        del conn.in_flight[req.req_id]
        left = conn.in_flight_by_dst[req.dst_pe] - 1
        if left:
            conn.in_flight_by_dst[req.dst_pe] = left
        else:
            del conn.in_flight_by_dst[req.dst_pe]
        inflight = self._inflight_dst[req.src_pe]
        inflight[req.dst_pe] -= 1
        if inflight[req.dst_pe] == 0:
            del inflight[req.dst_pe]
        self._trace_req(now, req.src_pe, "completion", req)
        if req.kind == PUT:
            self.puts_completed += 1
            self.heap.write(req.dst_pe, req.tag, req.size, now)
        else:
            self._signal_visible(req, now)
        if req.path == "proxy":
            ch = self.channels[req.src_pe]
            if req.kind == PUT or self.fence_waits_on_signals:
                ch.outstanding -= 1
            if req.kind == PUT:
                ch.outstanding_puts -= 1
            if ch.outstanding < 0:
                raise ModelError(f"negative outstanding count on PE {ch.pe}")
            self._maybe_release(ch)
        self.nic_advance(conn)

    def _signal_visible(self, req: WorkRequest, now: int) -> None:
        self._trace_req(now, req.dst_pe, "signal_visible", req)
        deliver_signal(self.heap, req.dst_pe, req.tag, now)
        if self.on_signal is not None:
            self.on_signal(req, now)

    # --------------------------------------------------------------- nvlink

    def nvlink_put_signal(self, src: int, dst: int, size: int, tag: str, latency_ns: int,
                          group: int = -1) -> None:
        """Intra-node put+signal: no proxy, fixed latency, unlimited concurrency."""
        put = self.new_request(PUT, src, dst, size, tag=tag, group_id=group, path="nvlink")
        sig = self.new_request(SIGNAL, src, dst, tag=tag, group_id=group, path="nvlink")
        now = self.sim.now
        self.puts_submitted += 1
        self.put_bytes_submitted += size
        self._trace_req(now, src, "submit", put)
        self._trace_req(now, src, "submit", sig)
        self.sim.schedule(now + latency_ns, (self._nvlink_done, put, sig))

    def _nvlink_done(self, put: WorkRequest, sig: WorkRequest) -> None:
        now = self.sim.now
        self._trace_req(now, put.src_pe, "completion", put)
        self.puts_completed += 1
        self.heap.write(put.dst_pe, put.tag, put.size, now)
        self._trace_req(now, sig.src_pe, "completion", sig)
        self._signal_visible(sig, now)

    # ---------------------------------------------------------------- trace

    def _trace_req(self, time: int, pe: int, kind: str, req: WorkRequest) -> None:
        # hot path: build the record directly instead of going through add()
        recs = self.trace.records
        recs.append(_new_record(Record, (time, len(recs), pe, kind, req.req_id, req.kind,
                                         req.src_pe, req.dst_pe, req.qp, req.size, req.tag,
                                         req.group_id, 1 if req.fence_flag else 0, req.path)))

    @property
    def nic_stall_episodes(self) -> int:
        return sum(c.stall_episodes for c in self.connections.values())

    @property
    def proxy_stop_episodes(self) -> int:
        return sum(len(c.drain_durations) for c in self.channels.values())
