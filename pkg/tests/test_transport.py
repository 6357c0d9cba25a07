import pytest

from fencesim.sim import ConfigError, ModelError, Simulator
from fencesim.trace import RunTrace
from fencesim.transport import (FENCE, NIC_FENCE, PEER_HASH, PROXY_FENCE, PUT, ROUND_ROBIN, SIGNAL,
                                SIGNAL_BYTES, LatencyModel, ProxyChannel, SymmetricHeap, Transport,
                                WorkRequest, deliver_signal, latency_preset, select_qp,
                                transfer_completion_time)


def make(latency="ideal", **kw):
    sim = Simulator()
    lat = latency_preset(latency) if isinstance(latency, str) else latency
    return sim, Transport(sim, lat, RunTrace(), **kw)


def direct(tr, kind, dst, size=0, qp=0, **kw):
    """A request handed straight to the NIC, bypassing the proxy."""
    req = tr.new_request(kind, 0, dst, size, path="direct", **kw)
    req.qp = qp
    return req


def times(tr, kind, req):
    return [r.time for r in tr.trace.records if r.kind == kind and r.req == req.req_id]


# --------------------------------------------------------- latency function


def test_completion_time_single_4k_put():
    assert transfer_completion_time(4096, 0, 3000, 0.0, 25.0) == 3163


def test_completion_time_two_destinations():
    # D = 1 with c = 0.5 scales the base term by 1.5
    assert transfer_completion_time(4096, 1, 3000, 0.5, 25.0) == int(3000 * 1.5 + 4096 / 25)
    assert transfer_completion_time(4096, 1, 3000, 1.0, 25.0) == int(3000 * 2 + 4096 / 25)


def test_latency_model_validation():
    with pytest.raises(ConfigError):
        LatencyModel(bandwidth=0)
    with pytest.raises(ConfigError):
        LatencyModel(base_rtt_ns=-1)
    with pytest.raises(ConfigError):
        LatencyModel(fence_scope="global")
    with pytest.raises(ConfigError):
        latency_preset("infiniband")


# ------------------------------------------------------------ QP selection


def test_peer_hash():
    assert select_qp(PEER_HASH, 5, 4) == 1
    assert select_qp(PEER_HASH, 0, 1) == 0


def test_round_robin_rotates_per_channel():
    ch = ProxyChannel(0)
    assert [select_qp(ROUND_ROBIN, 3, 4, ch) for _ in range(3)] == [0, 1, 2]


def test_select_qp_needs_a_qp():
    with pytest.raises(ConfigError):
        select_qp(PEER_HASH, 1, 0)


# --------------------------------------------------------- work requests


def test_fence_marker_never_flagged():
    with pytest.raises(ModelError):
        WorkRequest(FENCE, 0, 1, fence_flag=True)
    assert WorkRequest(FENCE, 0, 1, size=99).size == 0
    assert WorkRequest(SIGNAL, 0, 1).size == SIGNAL_BYTES


# ------------------------------------------------------------ proxy FIFO


def test_submit_sequence_and_order():
    sim, tr = make()
    ch = tr.channel(0)
    reqs = [tr.new_request(PUT, 0, 1, 4096) for _ in range(3)]
    assert [tr.proxy_submit(ch, r) for r in reqs] == [1, 2, 3]
    assert list(ch.fifo) == reqs


def test_submit_from_wrong_pe_rejected():
    sim, tr = make()
    with pytest.raises(ModelError):
        tr.proxy_submit(tr.channel(0), tr.new_request(PUT, 1, 2, 64))


def test_submission_does_not_advance_time():
    sim, tr = make()
    ch = tr.channel(0)
    for i in range(96):
        tr.proxy_submit(ch, tr.new_request(PUT, 0, 1 + i % 12, 4096))
    assert len(ch.fifo) == 96
    assert ch.outstanding == 0
    assert sim.now == 0


def test_nic_fence_marks_next_signal_only():
    sim, tr = make(ordering=NIC_FENCE)
    ch = tr.channel(0)
    p = tr.new_request(PUT, 0, 1, 4096)
    f = tr.new_request(FENCE, 0, 1)
    s1 = tr.new_request(SIGNAL, 0, 1, tag="a")
    s2 = tr.new_request(SIGNAL, 0, 1, tag="b")
    for r in (p, f, s1, s2):
        ch.fifo.append(r)
    actions = [tr.proxy_drain_step(ch) for _ in range(4)]
    assert actions == ["forward", "fence-deferred", "forward", "forward"]
    assert s1.fence_flag and not s2.fence_flag
    assert not ch.blocked


def test_proxy_fence_blocks_until_drained_in_quanta():
    # slingshot-like, one remote peer (no tail term): the Put completes at
    # 100 + floor(2000 + 4096 / 12.5) = 2427, the fence poll releases at 2500
    sim, tr = make("slingshot-like", ordering=PROXY_FENCE, peers_per_pe=1)
    ch = tr.channel(0)
    p = tr.new_request(PUT, 0, 1, 4096, tag="x")
    s = tr.new_request(SIGNAL, 0, 1, tag="x")
    for r in (p, tr.new_request(FENCE, 0, 1), s):
        tr.proxy_submit(ch, r)
    sim.run_until_idle()
    assert times(tr, "completion", p) == [2427]
    assert times(tr, "nic_service_start", s) == [2500]
    assert ch.drain_durations == [2500]
    assert tr.proxy_stop_episodes == 1


def test_fence_with_nothing_outstanding_passes():
    sim, tr = make(ordering=PROXY_FENCE)
    ch = tr.channel(0)
    ch.fifo.append(tr.new_request(FENCE, 0, 1))
    assert tr.proxy_drain_step(ch) == "fence-pass"


def test_proxy_forwards_in_fifo_order():
    sim, tr = make("slingshot-like", ordering=PROXY_FENCE, peers_per_pe=3)
    ch = tr.channel(0)
    reqs = []
    for dst in (1, 2, 3):
        reqs += [tr.new_request(PUT, 0, dst, 1024, tag=str(dst)), tr.new_request(FENCE, 0, dst),
                 tr.new_request(SIGNAL, 0, dst, tag=str(dst))]
    for r in reqs:
        tr.proxy_submit(ch, r)
    sim.run_until_idle()
    assert ch.forwarded == [r.req_id for r in reqs if r.kind != FENCE]


# -------------------------------------------------------------------- NIC


def test_put_to_empty_connection_starts_immediately():
    sim, tr = make()
    p = direct(tr, PUT, 1, 4096)
    conn = tr.connection_for(p)
    tr.nic_submit(conn, p)
    assert p.req_id in conn.in_flight and not conn.pipeline


def test_unflagged_requests_pipeline():
    sim, tr = make()
    a, b = direct(tr, PUT, 1, 4096), direct(tr, PUT, 1, 4096)
    conn = tr.connection_for(a)
    tr.nic_submit(conn, a)
    tr.nic_submit(conn, b)
    assert len(conn.in_flight) == 2


def test_flagged_signal_waits_on_same_connection():
    sim, tr = make()
    puts = [direct(tr, PUT, 1, 4096) for _ in range(2)]
    s = direct(tr, SIGNAL, 1, fence_flag=True)
    for r in (*puts, s):
        tr.nic_submit(tr.connection_for(r), r)
    conn = tr.connection_for(s)
    assert conn.blocked_head
    sim.run_until_idle()
    last_put = max(t for p in puts for t in times(tr, "completion", p))
    assert times(tr, "nic_service_start", s) == [last_put]
    assert tr.nic_stall_episodes == 1


def test_flagged_signal_ignores_other_connections():
    # one Put on QP 0, the flagged Signal on QP 1: nothing holds it back
    sim, tr = make()
    p = direct(tr, PUT, 1, 1 << 20, qp=0)
    s = direct(tr, SIGNAL, 1, qp=1, fence_flag=True)
    tr.nic_submit(tr.connection_for(p), p)
    tr.nic_submit(tr.connection_for(s), s)
    assert not tr.connection_for(s).blocked_head
    assert s.req_id in tr.connection_for(s).in_flight


def test_only_first_flagged_signal_waits():
    sim, tr = make()
    sigs = [direct(tr, SIGNAL, 1, fence_flag=(i == 0)) for i in range(3)]
    for s in sigs:
        tr.nic_submit(tr.connection_for(s), s)
    assert len(tr.connection_for(sigs[0]).in_flight) == 3


def test_ideal_single_put_timing():
    # service 100 ns, then 3000 + 4096 / 25
    sim, tr = make()
    p = tr.new_request(PUT, 0, 1, 4096, tag="t")
    tr.direct_submit(p)
    sim.run_until_idle()
    assert times(tr, "completion", p) == [100 + 3163]


def test_per_request_tail_with_two_destinations():
    lat = LatencyModel(base_rtt_ns=3000, bandwidth=25.0, completion_tail_coeff=0.5,
                       per_request_nic_service_ns=0, egress_lanes=2, tail_scope="request",
                       fence_scope="connection")
    sim, tr = make(lat)
    a, b = tr.new_request(PUT, 0, 1, 4096), tr.new_request(PUT, 0, 2, 4096)
    tr.direct_submit(a)
    tr.direct_submit(b)
    sim.run_until_idle()
    # the first sees one destination, the second two (lanes run at 12.5 B/ns)
    assert times(tr, "completion", a) == [int(3000 + 4096 / 12.5)]
    assert times(tr, "completion", b) == [int(3000 * 1.5 + 4096 / 12.5)]


# ------------------------------------------------------------------- heap


def test_deliver_signal_wakes_waiter():
    heap = SymmetricHeap()
    woke = []
    heap.wait(1, "f", woke.append)
    deliver_signal(heap, 1, "f", 100)
    assert woke == [100]
    # later waiters see the flag immediately
    heap.wait(1, "f", woke.append)
    assert woke == [100, 100]


def test_flag_time_never_decreases():
    heap = SymmetricHeap()
    deliver_signal(heap, 1, "f", 100)
    with pytest.raises(ModelError):
        deliver_signal(heap, 1, "f", 90)


def test_byte_and_put_conservation():
    sim, tr = make("slingshot-like", ordering=PROXY_FENCE, peers_per_pe=4)
    ch = tr.channel(0)
    sizes = [64, 4096, 1 << 16, 1 << 20]
    for i, size in enumerate(sizes):
        for r in (tr.new_request(PUT, 0, 1 + i, size, tag=str(i)), tr.new_request(FENCE, 0, 1 + i),
                  tr.new_request(SIGNAL, 0, 1 + i, tag=str(i))):
            tr.proxy_submit(ch, r)
    while sim.pending():
        sim.step()
        in_flight = sum(1 for c in tr.connections.values() for rid in c.in_flight
                        if tr._reqs[rid].kind == PUT)
        queued = sum(1 for r in ch.fifo if r.kind == PUT)
        pipelined = sum(1 for c in tr.connections.values() for r in c.pipeline if r.kind == PUT)
        assert tr.puts_submitted == tr.puts_completed + in_flight + queued + pipelined
        assert ch.outstanding >= 0
    assert tr.heap.bytes_written == tr.put_bytes_submitted == sum(sizes)
