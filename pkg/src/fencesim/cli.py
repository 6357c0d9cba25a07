"""Command-line experiment runner.

    fencesim sweep  --config exp.yaml [--out DIR] [--jobs N] [--trace] [--force]
    fencesim ablate --config exp.yaml
    fencesim verify [--config exp.yaml] [--trials N] [--inject-fault]
    fencesim fit    (--config exp.yaml | --csv FILE ...)

Exit codes: 0 success, 1 config error, 2 verification failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from . import experiments as ex
from .config import ExperimentConfig, parse_point_key, point_key
from .metrics import (atomic_write, fence_accounting, metrics_csv, read_metrics_csv,
                      verify_ordering)
from .protocols import VANILLA, run_dispatch
from .sim import ConfigError
from .workload import message_size

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3
COLUMNS = ("config_hash", "point", "metric", "value")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load(args, required: bool = True) -> Optional[ExperimentConfig]:
    if not args.config:
        if required:
            raise ConfigError("--config is required")
        return None
    return ExperimentConfig.load(args.config, seed=args.seed, out=args.out)


def _outdir(cfg: Optional[ExperimentConfig], args, name: str = "") -> str:
    base = args.out or (cfg.out if cfg else "results")
    return os.path.join(base, cfg.hash() if cfg else name)


def _write_rows(path: str, rows, config_hash: str) -> None:
    atomic_write(path, metrics_csv(rows, config_hash, COLUMNS))


def _write_trace(outdir: str, key: str, label: str, trace) -> None:
    path = os.path.join(outdir, "traces", f"{key}.{label}.jsonl")
    atomic_write(path, trace.dumps())


# -------------------------------------------------------------------- sweep


def run_point(data: dict, point: dict, outdir: str, want_trace: bool) -> list[tuple]:
    cfg = ExperimentConfig(data)
    h = cfg.hash()
    key = point_key(point)
    lat = cfg.latency()
    rows = []
    if cfg["workload"]["kind"] == "micro":
        w = cfg["workload"]
        res = ex.micro_point(point.get("N", w["N"]), point.get("size", w["size"]),
                             point.get("nodes", cfg["cluster"]["nodes"]), lat,
                             cfg["cluster"]["gpus_per_node"])
        return [(h, key, m, v) for m, v in res.items()]
    proto = cfg.protocol(**({"group_size": point["group_size"]} if "group_size" in point else {}))
    wl = cfg.workload(**{k: v for k, v in point.items() if k != "group_size"})
    runs = {proto.label: proto}
    if proto.label != "vanilla":
        runs["vanilla"] = VANILLA
    spans = {}
    for label, p in runs.items():
        tr = run_dispatch(p, wl, lat, cfg.seed)
        acc = fence_accounting(tr)
        spans[label] = tr.meta["makespan"]
        rows += [
            (h, key, f"{label}.makespan_ns", tr.meta["makespan"]),
            (h, key, f"{label}.comm_makespan_ns", tr.meta["comm_makespan"]),
            (h, key, f"{label}.fence_count", acc.fence_count),
            (h, key, f"{label}.proxy_blocked_ns", acc.proxy_blocked_total),
            (h, key, f"{label}.nic_stall_ns", acc.nic_stall_total),
            (h, key, f"{label}.flagged_signals", acc.flagged_signal_count),
            (h, key, f"{label}.violations", len(verify_ordering(tr))),
        ]
        if want_trace:
            _write_trace(outdir, key, label, tr)
    model = wl.model
    S = wl.S
    if (S * model.k) % model.E == 0:
        rows.append((h, key, "message_bytes", message_size(S, model.k, model.E, model.H)))
    rows.append((h, key, "nodes", wl.cluster.nodes))
    if proto.label != "vanilla":
        t = spans[proto.label]
        rows.append((h, key, "speedup_vs_vanilla", spans["vanilla"] / t if t else 1.0))
    return rows


def _point_job(job):
    data, point, outdir, want_trace, path = job
    rows = run_point(data, point, outdir, want_trace)
    _write_rows(path, rows, rows[0][0] if rows else "")
    return path


def cmd_sweep(args) -> int:
    cfg = _load(args)
    outdir = _outdir(cfg, args)
    grid = cfg.sweep_grid()
    jobs, done = [], 0
    for point in grid:
        path = os.path.join(outdir, "points", point_key(point) + ".csv")
        if os.path.exists(path) and not args.force:
            done += 1
            continue
        jobs.append((cfg.data, point, outdir, args.trace, path))
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_point_job, jobs))
    else:
        for job in jobs:
            _point_job(job)
    rows = []
    for point in grid:
        _, pr = read_metrics_csv(os.path.join(outdir, "points", point_key(point) + ".csv"))
        rows += [tuple(r[c] for c in COLUMNS) for r in pr]
    _write_rows(os.path.join(outdir, "sweep.csv"), rows, cfg.hash())
    print(f"sweep: {len(grid)} point(s), {len(jobs)} run, {done} reused -> {outdir}/sweep.csv")
    return EXIT_OK


# ------------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    cfg = _load(args)
    outdir = _outdir(cfg, args)
    seeds = cfg["ablate"]["seeds"] or [cfg.seed]
    w = cfg["workload"]
    if w["kind"] != "dispatch":
        raise ConfigError("ablate needs a dispatch workload")
    rows = ex.ablation(cfg.model(), cfg.cluster().nodes, int(w["S"]), seeds, cfg.latency(),
                       float(w["skew"]), cfg.cluster().gpus_per_node, cfg.compute())
    h = cfg.hash()
    out = []
    print(f"{'config':<10} {'speedup':>8} {'fences':>7} {'per-fence ns':>13}  cost")
    for r in rows:
        print(f"{r.protocol:<10} {r.speedup:>8.2f} {r.fence_count:>7d} {r.per_fence_ns:>13.0f}  {r.cost_class}")
        out += [(h, r.protocol, "makespan_ns", r.makespan_ns), (h, r.protocol, "speedup", r.speedup),
                (h, r.protocol, "fence_count", r.fence_count),
                (h, r.protocol, "per_fence_ns", r.per_fence_ns),
                (h, r.protocol, "cost_class", r.cost_class)]
    if args.trace:
        wl = cfg.workload()
        for name, p in ex.ABLATION.items():
            _write_trace(outdir, "ablate", name, run_dispatch(p, wl, cfg.latency(), cfg.seed))
    _write_rows(os.path.join(outdir, "ablate.csv"), out, h)
    return EXIT_OK


# ------------------------------------------------------------------- verify


def _split(trials: int, jobs: int) -> list[tuple[int, int]]:
    jobs = max(1, min(jobs, trials))
    step = -(-trials // jobs)
    return [(s, min(step, trials - s)) for s in range(0, trials, step)]


def _safe_chunk(a):
    seed, start, n = a
    return ex.verify_safe(n, seed, start)


def _fault_chunk(a):
    seed, start, n = a
    return ex.verify_fault_injected(n, seed, start)


def _run_chunks(fn, seed: int, trials: int, jobs: int) -> ex.VerifyReport:
    parts = [(seed, s, n) for s, n in _split(trials, jobs)]
    if jobs > 1 and len(parts) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(fn, parts))
    else:
        reps = [fn(p) for p in parts]
    total = ex.VerifyReport()
    for r in reps:
        total.trials += r.trials
        total.violating_trials += r.violating_trials
        total.violations += r.violations
        total.examples += r.examples
    return total


def cmd_verify(args) -> int:
    cfg = _load(args, required=False)
    vcfg = cfg["verify"] if cfg else {"trials": 1000, "inject_fault": False}
    trials = args.trials if args.trials is not None else int(vcfg["trials"])
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    inject = args.inject_fault or bool(vcfg["inject_fault"])
    h = cfg.hash() if cfg else "verify"
    ok = True
    rows = []

    safe = _run_chunks(_safe_chunk, seed, trials, args.jobs)
    print(f"safe modes: {safe.trials} trials, {safe.violations} violation(s)")
    for ex_ in safe.examples:
        print(f"  trial {ex_[0]} [{ex_[1]}]: {ex_[2]}")
    ok &= safe.violations == 0
    rows += [(h, "safe", "trials", safe.trials), (h, "safe", "violations", safe.violations)]

    bug = ex.qp_bug_scenario()
    print(f"round-robin + NIC fence (expected unsafe): {bug['round_robin']} violation(s)")
    print(f"peer-hash + NIC fence: {bug['peer_hash']} violation(s)")
    ok &= bug["round_robin"] >= 1 and bug["peer_hash"] == 0
    rows += [(h, "qp_bug", f"{k}.violations", v) for k, v in bug.items()]

    if inject:
        fault = _run_chunks(_fault_chunk, seed, trials, args.jobs)
        print(f"fault injected (fences removed): {fault.violating_trials}/{fault.trials} trials "
              f"with violations")
        ok &= fault.violations == 0
        rows += [(h, "fault", "trials", fault.trials),
                 (h, "fault", "violating_trials", fault.violating_trials)]

    _write_rows(os.path.join(_outdir(cfg, args, "verify"), "verify.csv"), rows, h)
    if not ok:
        print("verification FAILED", file=sys.stderr)
        return EXIT_VERIFY
    print("verification passed")
    return EXIT_OK


# ---------------------------------------------------------------------- fit


def _points_from_csv(paths) -> dict:
    pts: dict = {}
    for path in paths:
        _, rows = read_metrics_csv(path)
        by_point: dict = {}
        for r in rows:
            by_point.setdefault(r["point"], {})[r["metric"]] = r["value"]
        for key, metrics in by_point.items():
            if "message_bytes" not in metrics:
                continue
            nodes = int(metrics.get("nodes", parse_point_key(key).get("nodes", 0)))
            M = float(metrics["message_bytes"])
            for m, v in metrics.items():
                if m.endswith(".comm_makespan_ns"):
                    pts.setdefault((m.split(".")[0], nodes), []).append((M, float(v)))
    return pts


def cmd_fit(args) -> int:
    if args.csv:
        cfg = None
        fit_rows = ex.fit_rows(_points_from_csv(args.csv))
    else:
        cfg = _load(args)
        f = cfg["fit"]
        from .protocols import PROTOCOL_PRESETS
        unknown = [p for p in f["protocols"] if p not in PROTOCOL_PRESETS]
        if unknown:
            raise ConfigError(f"unknown protocol(s) in fit.protocols: {unknown}")
        fit_rows = ex.alpha_beta_table(cfg.model(), f["nodes"], f["S"],
                                       {p: PROTOCOL_PRESETS[p] for p in f["protocols"]},
                                       cfg.latency())
    h = cfg.hash() if cfg else "fit"
    rows = []
    print(f"{'protocol':<10} {'nodes':>5} {'alpha us':>10} {'beta ns/B':>10} {'R^2':>8}")
    for r in fit_rows:
        key = f"protocol={r.protocol};nodes={r.nodes}"
        if r.error:
            print(f"{r.protocol:<10} {r.nodes:>5} {'error: ' + r.error}")
            rows.append((h, key, "error", r.error))
            continue
        print(f"{r.protocol:<10} {r.nodes:>5} {r.alpha_ns / 1e3:>10.1f} {r.beta_ns_per_byte:>10.3f} "
              f"{r.r_squared:>8.5f}")
        rows += [(h, key, "alpha_ns", r.alpha_ns), (h, key, "beta_ns_per_byte", r.beta_ns_per_byte),
                 (h, key, "r_squared", r.r_squared)]
    _write_rows(os.path.join(_outdir(cfg, args, "fit"), "fit.csv"), rows, h)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment YAML file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", metavar="DIR", default=None, help="output directory")
    common.add_argument("--trace", action="store_true", help="write full run traces")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--force", action="store_true", help="re-run finished grid points")

    p = _Parser(prog="fencesim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("sweep", parents=[common], help="run a parameter grid")
    s.set_defaults(func=cmd_sweep)
    a = sub.add_parser("ablate", parents=[common], help="vanilla vs the three optimized configs")
    a.set_defaults(func=cmd_ablate)
    v = sub.add_parser("verify", parents=[common], help="randomized ordering verification")
    v.add_argument("--trials", type=int, default=None,
                   help="random trials (default from config, else 1000)")
    v.add_argument("--inject-fault", action="store_true",
                   help="also run vanilla with fences removed; violations then fail the run")
    v.set_defaults(func=cmd_verify)
    f = sub.add_parser("fit", parents=[common], help="alpha-beta fits per protocol and node count")
    f.add_argument("--csv", nargs="+", metavar="FILE", help="sweep CSVs to fit instead of running")
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - the exit code is the interface
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
