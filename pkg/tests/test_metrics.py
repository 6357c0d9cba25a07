import math

import numpy as np
import pytest

from fencesim.metrics import (DegenerateFitError, MalformedTraceError, MismatchError,
                              conservation_check, fence_accounting, fit_alpha_beta, heap_digest,
                              metrics_csv, read_metrics_csv, signaling_efficiency,
                              speedup_decomposition, verify_ordering)
from fencesim.protocols import (COMBINED, NIC_ORDER_ONLY, PUT_ONLY_PROTOCOL, VANILLA,
                                ordering_bug_workload, run_dispatch)
from fencesim.trace import RunTrace
from fencesim.workload import ClusterConfig, build_dispatch, model_preset

QWEN = model_preset("qwen3-30b")


def fake(span, digest="w", put_bytes=100, latency="l"):
    return RunTrace(meta={"comm_makespan": span, "workload_digest": digest,
                          "put_bytes": put_bytes, "latency": latency})


@pytest.fixture(scope="module")
def small():
    wl = build_dispatch(QWEN, ClusterConfig(2), 64, compute=None)
    return wl, {p.label: run_dispatch(p, wl) for p in (VANILLA, COMBINED, PUT_ONLY_PROTOCOL)}


# ------------------------------------------------------------ efficiency


def test_efficiency_of_a_50x_slower_run():
    assert signaling_efficiency(fake(50_000), fake(1_000)) == pytest.approx(0.02)


def test_efficiency_of_identical_runs():
    assert signaling_efficiency(fake(1234), fake(1234)) == 1.0


def test_efficiency_needs_matching_workloads():
    with pytest.raises(MismatchError):
        signaling_efficiency(fake(10, digest="a"), fake(10, digest="b"))
    with pytest.raises(MismatchError):
        signaling_efficiency(fake(10, put_bytes=1), fake(10, put_bytes=2))


def test_efficiency_on_real_runs(small):
    _, tr = small
    e = signaling_efficiency(tr["vanilla"], tr["put_only"])
    assert 0 < e < signaling_efficiency(tr["combined"], tr["put_only"]) <= 1.0 + 1e-9


# ------------------------------------------------------- fence accounting


def test_vanilla_accounting(small):
    wl, tr = small
    acc = fence_accounting(tr["vanilla"])
    assert acc.fence_count == 8 * 64
    assert len(acc.per_fence) <= acc.fence_count
    assert acc.proxy_blocked_total == sum(acc.per_fence) > 0
    assert acc.nic_stall_total == 0 and acc.flagged_signal_count == 0


def test_combined_accounting(small):
    _, tr = small
    acc = fence_accounting(tr["combined"])
    assert acc.fence_count == acc.flagged_signal_count == 8 * 4
    assert acc.proxy_blocked_total == 0


def test_put_only_accounting_is_zero(small):
    _, tr = small
    acc = fence_accounting(tr["put_only"])
    assert (acc.fence_count, acc.proxy_blocked_total, acc.nic_stall_total,
            acc.flagged_signal_count, acc.signal_time_total) == (0, 0, 0, 0, 0)
    assert acc.transfer_time_folded == acc.put_time_total > 0


def test_unmatched_block_is_malformed():
    tr = RunTrace()
    tr.add(10, 0, "proxy_block_end", rkind="fence")
    with pytest.raises(MalformedTraceError):
        fence_accounting(tr)
    tr = RunTrace()
    tr.add(10, 0, "proxy_block_begin", rkind="fence")
    with pytest.raises(MalformedTraceError):
        fence_accounting(tr)


# ------------------------------------------------------------- alpha-beta


def test_fit_exact_line():
    M = np.array([1024, 4096, 16384, 65536])
    f = fit_alpha_beta(zip(M, 2000 + 0.5 * M))
    assert f.alpha == pytest.approx(2000)
    assert f.beta == pytest.approx(0.5)
    assert f.r_squared == pytest.approx(1.0)


def test_fit_constant():
    f = fit_alpha_beta([(1, 7.0), (2, 7.0), (5, 7.0)])
    assert f.beta == pytest.approx(0, abs=1e-12)
    assert f.alpha == pytest.approx(7.0)
    assert f.r_squared == 1.0


def test_fit_degenerate():
    with pytest.raises(DegenerateFitError):
        fit_alpha_beta([(4096, 1.0), (4096, 2.0)])
    with pytest.raises(DegenerateFitError):
        fit_alpha_beta([(4096, 1.0)])


def test_fit_matches_closed_form_ols():
    rng = np.random.default_rng(0)
    M = rng.uniform(1e3, 1e5, 20)
    T = 500 + 0.3 * M + rng.normal(0, 50, 20)
    f = fit_alpha_beta(zip(M, T))
    beta = np.cov(M, T, bias=True)[0, 1] / np.var(M)
    alpha = T.mean() - beta * M.mean()
    r = np.corrcoef(M, T)[0, 1]
    assert f.beta == pytest.approx(beta)
    assert f.alpha == pytest.approx(alpha)
    assert f.r_squared == pytest.approx(r * r)
    assert 0 <= f.r_squared <= 1


# ----------------------------------------------------------- decomposition


def test_decomposition_components_sum_to_total():
    d = speedup_decomposition(fake(1000), fake(880), fake(500), fake(450))
    assert (d.reordering, d.fence_reduction, d.nic_ordering) == (120, 380, 50)
    assert d.reordering + d.fence_reduction + d.nic_ordering == d.total == 550
    assert sum(d.fractions().values()) == pytest.approx(1.0)
    assert d.relative_gains()["reordering"] == pytest.approx(0.12)


def test_decomposition_identical_runs_is_zero():
    d = speedup_decomposition(*(fake(700) for _ in range(4)))
    assert d.total == 0 and set(d.fractions().values()) == {0.0}


def test_decomposition_needs_matching_configs():
    with pytest.raises(MismatchError):
        speedup_decomposition(fake(1), fake(1), fake(1), fake(1, latency="other"))


# --------------------------------------------------------------- ordering


def test_safe_traces_have_no_violations(small):
    _, tr = small
    assert verify_ordering(tr["vanilla"]) == []
    assert verify_ordering(tr["combined"]) == []


def test_round_robin_bug_and_peer_hash_fix():
    wl = ordering_bug_workload()
    bad = verify_ordering(run_dispatch(NIC_ORDER_ONLY.with_(qp_policy="round_robin"), wl))
    assert len(bad) >= 1
    assert "before put" in str(bad[0])
    assert verify_ordering(run_dispatch(NIC_ORDER_ONLY.with_(qp_policy="peer_hash"), wl)) == []


def test_dropped_fences_are_caught():
    wl = ordering_bug_workload()
    assert verify_ordering(run_dispatch(VANILLA.with_(drop_fences=True), wl))


def test_signal_without_put_is_a_violation():
    tr = RunTrace()
    tr.add(5, 1, "signal_visible", req=3, rkind="signal", src=0, dst=1, tag="orphan")
    (v,) = verify_ordering(tr)
    assert v.put_req == -1 and v.put_time is None


# ----------------------------------------------------------- conservation


def test_healthy_trace_conserves(small):
    wl, tr = small
    assert conservation_check(tr["vanilla"], wl).ok
    assert conservation_check(tr["put_only"], wl, expect_signals=False).ok


def test_dropped_completion_names_the_put(small):
    wl, tr = small
    t = tr["vanilla"]
    victim = next(r for r in t.records if r.kind == "completion" and r.rkind == "put")
    broken = RunTrace([r for r in t.records if r is not victim], dict(t.meta))
    rep = conservation_check(broken, wl)
    assert not rep.ok
    assert any(victim.tag in p and "never completed" in p for p in rep.problems)


def test_heap_digests_match_across_protocols(small):
    _, tr = small
    assert heap_digest(tr["vanilla"]) == heap_digest(tr["combined"])


# -------------------------------------------------------------------- csv


def test_csv_round_trip(tmp_path):
    text = metrics_csv([("abc", "p", "efficiency", 0.5), ("abc", "p", "nan", math.nan)], "abc",
                       columns=("config_hash", "point", "metric", "value"))
    path = tmp_path / "m.csv"
    path.write_text(text)
    header, rows = read_metrics_csv(str(path))
    assert header == {"schema": "1", "config_hash": "abc"}
    assert rows[0] == {"config_hash": "abc", "point": "p", "metric": "efficiency", "value": "0.5"}
    assert rows[1]["value"] == "nan"


def test_trace_round_trip(small):
    _, tr = small
    t = tr["combined"]
    back = RunTrace.loads(t.dumps())
    assert back.records == t.records
    assert back.dumps() == t.dumps()
