"""Experiment configuration: YAML files with strict keys and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from typing import Any, Optional

import yaml

from .protocols import PROTOCOL_PRESETS, ProtocolConfig
from .sim import ConfigError
from .transport import LATENCY_PRESETS, LatencyModel
from .workload import (ClusterConfig, ComputeModel, DispatchWorkload, ModelConfig,
                       build_dispatch, microbenchmark_workload, model_preset)

REQUIRED = object()

# Every accepted key with its default. Nested dicts are sections.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "results",
    "model": REQUIRED,  # preset name or {name, H, I, E, k, compute_intensity}
    "cluster": {"nodes": REQUIRED, "gpus_per_node": 4, "num_qps": 1},
    "protocol": {
        "preset": "combined",
        "signaling": None,
        "ordering": None,
        "group_size": None,
        "transport": None,
        "qp_policy": None,
        "fence_waits_on_signals": None,
        "leader_may_compute": None,
        "issue_cost_ns": None,
        "gpu_direct_issue_cost_ns": None,
        "nvlink_latency_ns": None,
    },
    "workload": {
        "kind": "dispatch",  # dispatch | micro
        "S": 1024,
        "skew": 0.0,
        "tile_mode": False,
        "tile_bytes": 16384,
        "compute": True,
        "compute_intensity": None,
        "N": 96,
        "size": 4096,
    },
    "compute": {"processors_per_pe": 108, "slot_flops_per_ns": 2890.0, "max_chunks_per_payload": 16},
    "latency": {
        "preset": "slingshot-like",
        "base_rtt_ns": None,
        "bandwidth": None,
        "completion_tail_coeff": None,
        "per_request_nic_service_ns": None,
        "proxy_poll_quantum_ns": None,
        "egress_lanes": None,
        "tail_scope": None,
        "fence_scope": None,
        "ordered_completion": None,
    },
    "sweep": {"S": None, "N": None, "size": None, "nodes": None, "group_size": None},
    "ablate": {"seeds": None},
    "verify": {"trials": 1000, "inject_fault": False},
    "fit": {"S": [1024, 4096, 16384, 65536], "nodes": [2, 4, 8, 16],
            "protocols": ["vanilla", "combined"]},
}

SWEEP_AXES = ("S", "N", "size", "nodes", "group_size")


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)}")
    out = {}
    for key, default in defaults.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key) or {}, sub)
        elif key in given:
            out[key] = given[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {sub}")
        else:
            out[key] = copy.deepcopy(default)
    return out


class ExperimentConfig:
    """Effective configuration; every value is filled in and validated."""

    def __init__(self, raw: Optional[dict] = None, **overrides):
        raw = copy.deepcopy(raw or {})
        for key, val in overrides.items():
            if val is not None:
                raw[key] = val
        self.data = _merge(DEFAULTS, raw)
        # build everything once so errors surface before any run
        self.model()
        self.cluster()
        self.protocol()
        self.latency()
        self.compute()
        self.sweep_grid()

    @classmethod
    def load(cls, path: str, **overrides) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        return cls(raw, **overrides)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out(self) -> str:
        return self.data["out"]

    def hash(self) -> str:
        d = {k: v for k, v in self.data.items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    # ---------------------------------------------------------- builders

    def model(self) -> ModelConfig:
        m = self.data["model"]
        intensity = self.data["workload"]["compute_intensity"]
        if isinstance(m, str):
            model = model_preset(m)
        elif isinstance(m, dict):
            allowed = {"name", "H", "I", "E", "k", "compute_intensity"}
            unknown = sorted(set(m) - allowed)
            if unknown:
                raise ConfigError(f"unknown key(s) at model: {', '.join(unknown)}")
            try:
                model = ModelConfig(**{"name": "custom", **m})
            except TypeError as exc:
                raise ConfigError(f"model: {exc}") from None
        else:
            raise ConfigError("model must be a preset name or a mapping")
        if intensity is not None:
            model = ModelConfig(model.name, model.H, model.I, model.E, model.k, float(intensity))
        return model

    def cluster(self, nodes: Optional[int] = None) -> ClusterConfig:
        c = self.data["cluster"]
        return ClusterConfig(int(nodes if nodes is not None else c["nodes"]),
                             int(c["gpus_per_node"]), int(c["num_qps"]))

    def protocol(self, **overrides) -> ProtocolConfig:
        p = dict(self.data["protocol"])
        name = p.pop("preset")
        if name not in PROTOCOL_PRESETS:
            raise ConfigError(f"unknown protocol preset {name!r}; choose from {sorted(PROTOCOL_PRESETS)}")
        fields = asdict(PROTOCOL_PRESETS[name])
        fields.update({k: v for k, v in p.items() if v is not None})
        fields.update(overrides)
        try:
            return ProtocolConfig(**fields)
        except TypeError as exc:
            raise ConfigError(f"protocol: {exc}") from None

    def latency(self) -> LatencyModel:
        l = dict(self.data["latency"])
        name = l.pop("preset")
        if name not in LATENCY_PRESETS:
            raise ConfigError(f"unknown latency preset {name!r}; choose from {sorted(LATENCY_PRESETS)}")
        return LATENCY_PRESETS[name].with_(**{k: v for k, v in l.items() if v is not None})

    def compute(self) -> Optional[ComputeModel]:
        if not self.data["workload"]["compute"]:
            return None
        c = self.data["compute"]
        return ComputeModel(int(c["processors_per_pe"]), float(c["slot_flops_per_ns"]),
                            int(c["max_chunks_per_payload"]),
                            int(self.data["workload"]["tile_bytes"]))

    def workload(self, seed: Optional[int] = None, **point) -> DispatchWorkload:
        """Workload for one grid point; ``point`` holds sweep-axis overrides."""
        w = self.data["workload"]
        seed = self.seed if seed is None else seed
        nodes = point.get("nodes", self.data["cluster"]["nodes"])
        if w["kind"] == "micro":
            return microbenchmark_workload(int(point.get("N", w["N"])), int(point.get("size", w["size"])),
                                           int(nodes), "coupled", self.data["cluster"]["gpus_per_node"])
        if w["kind"] != "dispatch":
            raise ConfigError(f"workload.kind must be 'dispatch' or 'micro', got {w['kind']!r}")
        return build_dispatch(self.model(), self.cluster(nodes), int(point.get("S", w["S"])),
                              float(w["skew"]), int(w["tile_bytes"]), seed, bool(w["tile_mode"]),
                              self.compute())

    def sweep_grid(self) -> list[dict]:
        axes = {k: v for k, v in self.data["sweep"].items() if v is not None}
        kind = self.data["workload"]["kind"]
        allowed = {"micro": {"N", "size", "nodes"}, "dispatch": {"S", "nodes", "group_size"}}[kind] \
            if kind in ("micro", "dispatch") else set()
        for axis, values in axes.items():
            if axis not in allowed:
                raise ConfigError(f"sweep axis {axis!r} does not apply to {kind} workloads")
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep.{axis} must be a non-empty list")
            for v in values:
                if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                    raise ConfigError(f"sweep.{axis} values must be positive integers, got {v!r}")
        grid = [{}]
        for axis in SWEEP_AXES:
            if axis in axes:
                grid = [dict(g, **{axis: v}) for g in grid for v in axes[axis]]
        return grid


def point_key(point: dict) -> str:
    return ";".join(f"{k}={point[k]}" for k in SWEEP_AXES if k in point) or "default"


def parse_point_key(key: str) -> dict:
    if key == "default":
        return {}
    return {k: int(v) for k, v in (kv.split("=") for kv in key.split(";"))}
