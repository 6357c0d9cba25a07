"""Trace analysis: signaling efficiency, fence accounting, alpha-beta fits,
speedup decomposition, ordering and conservation checks, CSV output."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .trace import RunTrace
from .workload import DispatchWorkload

CSV_SCHEMA_VERSION = 1


class MalformedTraceError(ValueError):
    pass


class MismatchError(ValueError):
    """Two traces that should describe the same workload do not."""


def _check_same(traces: Sequence[RunTrace], keys: Sequence[str]) -> None:
    for key in keys:
        vals = {repr(t.meta.get(key)) for t in traces}
        if len(vals) > 1:
            raise MismatchError(f"traces differ in {key}")


# ------------------------------------------------------------ efficiency


def signaling_efficiency(signaled: RunTrace, put_only: RunTrace) -> float:
    """Throughput of a signaled run relative to the put-only run moving the same bytes."""
    _check_same((signaled, put_only), ("workload_digest", "put_bytes"))
    t_sig = signaled.meta["comm_makespan"]
    t_put = put_only.meta["comm_makespan"]
    if t_sig <= 0:
        return 1.0
    return t_put / t_sig


# --------------------------------------------------------- fence accounting


@dataclass
class FenceAccounting:
    fence_count: int = 0
    proxy_blocked_total: int = 0
    per_fence: list[int] = field(default_factory=list)
    nic_stall_total: int = 0
    nic_stall_count: int = 0
    flagged_signal_count: int = 0
    put_time_total: int = 0  # sum over Puts of service start -> completion
    signal_time_total: int = 0  # same for Signals

    @property
    def transfer_time_folded(self) -> int:
        """Put and Signal time together, the way a per-transfer breakdown reports them."""
        return self.put_time_total + self.signal_time_total

    def as_rows(self) -> list[tuple[str, float]]:
        return [
            ("fence_count", self.fence_count),
            ("proxy_blocked_total_ns", self.proxy_blocked_total),
            ("nic_stall_total_ns", self.nic_stall_total),
            ("nic_stall_count", self.nic_stall_count),
            ("flagged_signal_count", self.flagged_signal_count),
            ("put_time_total_ns", self.put_time_total),
            ("signal_time_total_ns", self.signal_time_total),
            ("transfer_time_folded_ns", self.transfer_time_folded),
        ]


def _pair_blocks(trace: RunTrace, begin: str, end: str, key) -> list[int]:
    open_at: dict = {}
    out = []
    for r in trace.records:
        if r.kind == begin:
            k = key(r)
            if k in open_at:
                raise MalformedTraceError(f"{begin} for {k} while already open")
            open_at[k] = r.time
        elif r.kind == end:
            k = key(r)
            if k not in open_at:
                raise MalformedTraceError(f"{end} for {k} without {begin}")
            out.append(r.time - open_at.pop(k))
    if open_at:
        raise MalformedTraceError(f"unterminated {begin}: {sorted(open_at)[:3]}")
    return out


def fence_accounting(trace: RunTrace) -> FenceAccounting:
    acc = FenceAccounting()
    started: dict[int, int] = {}
    for r in trace.records:
        if r.kind == "submit" and r.rkind == "fence":
            acc.fence_count += 1
        elif r.kind == "nic_service_start":
            started[r.req] = r.time
            if r.rkind == "signal" and r.flag:
                acc.flagged_signal_count += 1
        elif r.kind == "completion" and r.req in started:
            dt = r.time - started.pop(r.req)
            if r.rkind == "put":
                acc.put_time_total += dt
            else:
                acc.signal_time_total += dt
    acc.per_fence = _pair_blocks(trace, "proxy_block_begin", "proxy_block_end", lambda r: r.pe)
    acc.proxy_blocked_total = sum(acc.per_fence)
    stalls = _pair_blocks(trace, "nic_block_begin", "nic_block_end", lambda r: r.req)
    acc.nic_stall_total = sum(stalls)
    acc.nic_stall_count = len(stalls)
    return acc


def proxy_stop_count(trace: RunTrace) -> int:
    return sum(1 for r in trace.records if r.kind == "proxy_block_begin")


def nic_stall_count(trace: RunTrace) -> int:
    return sum(1 for r in trace.records if r.kind == "nic_block_begin")


# ------------------------------------------------------------ alpha-beta


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaBetaFit:
    alpha: float  # ns
    beta: float  # ns / byte
    r_squared: float
    n: int = 0

    def predict(self, M) -> np.ndarray:
        return self.alpha + self.beta * np.asarray(M, dtype=float)


def fit_alpha_beta(points: Iterable[tuple[float, float]]) -> AlphaBetaFit:
    """Ordinary least squares for T = alpha + beta * M."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or len(pts) < 2 or len(np.unique(pts[:, 0])) < 2:
        raise DegenerateFitError("need at least two distinct message sizes")
    M, T = pts[:, 0], pts[:, 1]
    X = np.column_stack([np.ones_like(M), M])
    (alpha, beta), *_ = np.linalg.lstsq(X, T, rcond=None)
    resid = T - (alpha + beta * M)
    ss_res = float(resid @ resid)
    ss_tot = float(((T - T.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)
    return AlphaBetaFit(float(alpha), float(beta), min(r2, 1.0), len(pts))


# -------------------------------------------------- speedup decomposition


@dataclass(frozen=True)
class Decomposition:
    t_coupled: int
    t_gs1: int
    t_knee: int
    t_full: int

    @property
    def reordering(self) -> int:
        return self.t_coupled - self.t_gs1

    @property
    def fence_reduction(self) -> int:
        return self.t_gs1 - self.t_knee

    @property
    def nic_ordering(self) -> int:
        return self.t_knee - self.t_full

    @property
    def total(self) -> int:
        return self.t_coupled - self.t_full

    def fractions(self) -> dict[str, float]:
        parts = {"reordering": self.reordering, "fence_reduction": self.fence_reduction,
                 "nic_ordering": self.nic_ordering}
        if self.total == 0:
            return {k: 0.0 for k in parts}
        return {k: v / self.total for k, v in parts.items()}

    def relative_gains(self) -> dict[str, float]:
        """Latency reduction of each step relative to the latency before it."""
        def rel(a, b):
            return 0.0 if a == 0 else (a - b) / a
        return {"reordering": rel(self.t_coupled, self.t_gs1),
                "fence_reduction": rel(self.t_gs1, self.t_knee),
                "nic_ordering": rel(self.t_knee, self.t_full)}


def speedup_decomposition(coupled: RunTrace, gs1: RunTrace, knee: RunTrace, full: RunTrace,
                          key: str = "comm_makespan") -> Decomposition:
    """Split the coupled -> combined latency delta into three telescoping steps."""
    _check_same((coupled, gs1, knee, full), ("workload_digest", "latency"))
    return Decomposition(*(int(t.meta[key]) for t in (coupled, gs1, knee, full)))


# ------------------------------------------------------- ordering checker


@dataclass(frozen=True)
class Violation:
    pe: int  # receiving PE
    signal_req: int
    tag: str
    signal_time: int
    put_req: int  # -1 when the Put never completed
    put_time: Optional[int]

    def __str__(self) -> str:
        put = "never" if self.put_time is None else f"t={self.put_time}"
        return (f"signal {self.signal_req} ({self.tag}) visible on PE {self.pe} at "
                f"t={self.signal_time} before put {self.put_req} completed ({put})")


def verify_ordering(trace: RunTrace) -> list[Violation]:
    """Every Signal must become visible no earlier than each Put it announces completes.

    A Signal announces the Puts that carry its tag. All violations are returned.
    """
    puts: dict[str, list[int]] = {}
    done: dict[int, int] = {}
    for r in trace.records:
        if r.rkind != "put":
            continue
        if r.kind == "submit":
            puts.setdefault(r.tag, []).append(r.req)
        elif r.kind == "completion":
            done[r.req] = r.time
    out = []
    for r in trace.records:
        if r.kind != "signal_visible":
            continue
        for p in puts.get(r.tag, ()):
            t = done.get(p)
            if t is None or t > r.time:
                out.append(Violation(r.pe, r.req, r.tag, r.time, p, t))
        if r.tag not in puts:
            out.append(Violation(r.pe, r.req, r.tag, r.time, -1, None))
    return out


# ----------------------------------------------------------- conservation


@dataclass
class ConservationReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok


def conservation_check(trace: RunTrace, workload: DispatchWorkload,
                       expect_signals: bool = True) -> ConservationReport:
    rep = ConservationReport()
    completed: dict[str, int] = {}
    put_req: dict[str, int] = {}
    visible: dict[str, int] = {}
    for r in trace.records:
        if r.rkind == "put" and r.kind == "submit":
            put_req[r.tag] = r.req
        elif r.rkind == "put" and r.kind == "completion":
            completed[r.tag] = completed.get(r.tag, 0) + r.size
        elif r.kind == "signal_visible":
            visible[r.tag] = visible.get(r.tag, 0) + 1
    want = 0
    for ts in workload.transfers.values():
        for t in ts:
            want += t.size
            got = completed.get(t.tag)
            if got is None:
                rep.problems.append(f"put {put_req.get(t.tag, '?')} ({t.tag}) never completed")
            elif got != t.size:
                rep.problems.append(f"put {t.tag} delivered {got} of {t.size} bytes")
            if expect_signals:
                n = visible.get(t.tag, 0)
                if n != 1:
                    rep.problems.append(f"flag {t.tag} set {n} times")
    have = sum(completed.values())
    if have != want:
        rep.problems.append(f"byte conservation: {have} delivered, {want} submitted")
    return rep


def heap_digest(trace: RunTrace) -> str:
    return trace.meta["heap_digest"]


# -------------------------------------------------------------------- CSV


def metrics_csv(rows: Iterable[tuple], config_hash: str,
                columns: Sequence[str] = ("config_hash", "metric", "value")) -> str:
    buf = io.StringIO()
    buf.write(f"# schema={CSV_SCHEMA_VERSION} config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_metrics_csv(path: str) -> tuple[dict, list[dict]]:
    """Returns (header fields, rows) for a file written by ``metrics_csv``."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise MalformedTraceError(f"{path}: missing schema header")
        header = dict(kv.split("=", 1) for kv in first[1:].split())
        rows = list(csv.DictReader(fh))
    return header, rows
