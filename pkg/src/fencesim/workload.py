"""MoE dispatch workloads: expert placement, routing, message sizes, compute."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .sim import ConfigError

BYTES_PER_ELEMENT = 2  # BF16
DEFAULT_TILE_BYTES = 16 * 1024
FLOP_PER_BYTE_PER_TFLOP_PER_GB = 1000.0  # 1 TFLOP/GB == 1000 FLOP/B


@dataclass(frozen=True)
class ModelConfig:
    name: str
    H: int
    I: int
    E: int
    k: int
    compute_intensity: Optional[float] = None  # TFLOPs per GB received

    def __post_init__(self):
        for dim in ("H", "I", "E", "k"):
            if getattr(self, dim) <= 0:
                raise ConfigError(f"{self.name}: {dim} must be positive")
        if self.k > self.E:
            raise ConfigError(f"{self.name}: top-k {self.k} exceeds expert count {self.E}")
        if self.compute_intensity is not None and self.compute_intensity < 0:
            raise ConfigError(f"{self.name}: compute_intensity must be >= 0")


MODEL_PRESETS: dict[str, ModelConfig] = {
    "qwen3-30b": ModelConfig("qwen3-30b", H=2048, I=768, E=128, k=8, compute_intensity=4.6),
    "gpt-oss-120b": ModelConfig("gpt-oss-120b", H=2880, I=2880, E=128, k=4, compute_intensity=17.3),
    # no published intensity; end-to-end runs must supply one
    "deepseek-v3": ModelConfig("deepseek-v3", H=7168, I=2048, E=256, k=8),
    "llama4-scout": ModelConfig("llama4-scout", H=5120, I=8192, E=16, k=1, compute_intensity=49.2),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    try:
        base = MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}") from None
    if not overrides:
        return base
    kw = {f: getattr(base, f) for f in ("name", "H", "I", "E", "k", "compute_intensity")}
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass(frozen=True)
class ClusterConfig:
    nodes: int
    gpus_per_node: int = 4
    num_qps: int = 1

    def __post_init__(self):
        if self.nodes < 1 or self.gpus_per_node < 1:
            raise ConfigError("nodes and gpus_per_node must be >= 1")
        if self.num_qps < 1:
            raise ConfigError("num_qps must be >= 1")

    @property
    def P(self) -> int:
        return self.nodes * self.gpus_per_node

    def node_of(self, pe: int) -> int:
        return pe // self.gpus_per_node

    def same_node(self, a: int, b: int) -> bool:
        return a // self.gpus_per_node == b // self.gpus_per_node

    def remote_pes(self, pe: int) -> list[int]:
        return [q for q in range(self.P) if not self.same_node(pe, q)]


@dataclass(frozen=True)
class ComputeModel:
    """Receive-side expert compute.

    ``slot_flops_per_ns`` is the throughput of one processor slot; the
    default is an A100-class SM (about 312 dense BF16 TFLOP/s over 108 SMs).
    Each received payload is split into at most ``max_chunks_per_payload``
    pieces, no smaller than one tile, that run on any free slot.
    """

    processors_per_pe: int = 108
    slot_flops_per_ns: float = 2890.0
    max_chunks_per_payload: int = 16
    tile_bytes: int = DEFAULT_TILE_BYTES

    def __post_init__(self):
        if self.processors_per_pe < 1:
            raise ConfigError("processors_per_pe must be >= 1")
        if not self.slot_flops_per_ns > 0:
            raise ConfigError("slot_flops_per_ns must be > 0")
        if self.max_chunks_per_payload < 1 or self.tile_bytes < 1:
            raise ConfigError("max_chunks_per_payload and tile_bytes must be >= 1")

    def compute_ns(self, nbytes: int, intensity: float) -> int:
        flops = nbytes * intensity * FLOP_PER_BYTE_PER_TFLOP_PER_GB
        return int(round(flops / self.slot_flops_per_ns))

    def chunks(self, nbytes: int) -> list[int]:
        if nbytes <= 0:
            return []
        n = min(self.max_chunks_per_payload, max(1, -(-nbytes // self.tile_bytes)))
        base, extra = divmod(nbytes, n)
        return [base + (1 if i < extra else 0) for i in range(n)]


@dataclass(frozen=True)
class Transfer:
    """One Put (and the Signal announcing it) from ``src`` to ``dst``."""

    src: int
    dst: int
    expert: int
    size: int
    tokens: int
    tile: int = 0
    remote: bool = True

    @cached_property
    def tag(self) -> str:
        return f"{self.src}>{self.dst}:e{self.expert}:t{self.tile}"


@dataclass
class DispatchWorkload:
    model: ModelConfig
    cluster: ClusterConfig
    S: int
    skew: float = 0.0
    seed: int = 0
    tile_bytes: int = DEFAULT_TILE_BYTES
    tile_mode: bool = False
    token_counts: Optional[np.ndarray] = None  # (P, E) tokens each source routes to each expert
    transfers: dict[int, list[Transfer]] = field(default_factory=dict)
    compute: Optional[ComputeModel] = None
    micro_mode: Optional[str] = None  # set for microbenchmark workloads

    def remote_transfers(self, pe: int) -> list[Transfer]:
        return [t for t in self.transfers.get(pe, ()) if t.remote]

    def local_transfers(self, pe: int) -> list[Transfer]:
        return [t for t in self.transfers.get(pe, ()) if not t.remote]

    @property
    def total_put_bytes(self) -> int:
        return sum(t.size for ts in self.transfers.values() for t in ts)

    @property
    def n_transfers(self) -> int:
        return sum(len(ts) for ts in self.transfers.values())

    def geometry(self) -> tuple:
        """Hashable summary used to check two runs moved the same data."""
        return tuple(sorted((t.src, t.dst, t.tag, t.size) for ts in self.transfers.values() for t in ts))


def expert_home(expert: int, P: int) -> int:
    """Experts are dealt to PEs round-robin."""
    return expert % P


def remote_transfer_count(E: int, P: int, P_local: int) -> int:
    if P <= 0 or E % P != 0:
        raise ConfigError(f"expert count {E} is not divisible by PE count {P}")
    if not 0 <= P_local <= P:
        raise ConfigError("P_local must lie in [0, P]")
    return (P - P_local) * (E // P)


def message_size(S: int, k: int, E: int, H: int) -> int:
    if (S * k) % E != 0:
        raise ConfigError(f"S*k = {S * k} is not divisible by E = {E}; use routed token counts")
    return (S * k // E) * H * BYTES_PER_ELEMENT


def zipf_weights(E: int, s: float) -> np.ndarray:
    ranks = np.arange(1, E + 1, dtype=float)
    w = ranks ** (-float(s))
    return w / w.sum()


def _sample_distinct(rng: np.random.Generator, p: np.ndarray, S: int, k: int) -> np.ndarray:
    """(S, k) rank indices, each row k distinct draws from p (rejection on repeats)."""
    E = len(p)
    picks = rng.choice(E, size=(S, k), p=p)
    for j in range(1, k):
        while True:
            dup = (picks[:, :j] == picks[:, j:j + 1]).any(axis=1)
            n = int(dup.sum())
            if n == 0:
                break
            picks[dup, j] = rng.choice(E, size=n, p=p)
    return picks


def zipf_route(S: int, E: int, s: float, k: int, seed, ranking: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-expert token counts for ``S`` tokens each picking ``k`` distinct experts.

    Rank r has weight r**-s over a seeded random ranking of the experts.
    ``s = inf`` sends every token to the top-k ranked experts.
    """
    if s < 0:
        raise ConfigError("skew exponent must be >= 0")
    if k > E:
        raise ConfigError("k must not exceed E")
    rng = np.random.default_rng(seed)
    if ranking is None:
        ranking = rng.permutation(E)
    counts = np.zeros(E, dtype=np.int64)
    if S == 0:
        return counts
    if np.isinf(s):
        counts[ranking[:k]] = S
        return counts
    picks = _sample_distinct(rng, zipf_weights(E, s), S, k)
    np.add.at(counts, ranking[picks.ravel()], 1)
    return counts


def balanced_route(S: int, E: int, k: int) -> np.ndarray:
    """Deterministic round-robin routing: token t takes experts (t*k + j) mod E."""
    idx = (np.arange(S)[:, None] * k + np.arange(k)[None, :]) % E
    return np.bincount(idx.ravel(), minlength=E).astype(np.int64)


def _split(size: int, tile_bytes: int) -> list[int]:
    full, rest = divmod(size, tile_bytes)
    return [tile_bytes] * full + ([rest] if rest else [])


def build_dispatch(
    model: ModelConfig,
    cluster: ClusterConfig,
    S: int,
    skew: float = 0.0,
    tile_bytes: int = DEFAULT_TILE_BYTES,
    seed: int = 0,
    tile_mode: bool = False,
    compute: Optional[ComputeModel] = ComputeModel(),
) -> DispatchWorkload:
    """One dispatch phase: every PE sends its routed tokens to each expert's home PE."""
    P = cluster.P
    if model.E % P != 0:
        raise ConfigError(f"expert count {model.E} is not divisible by PE count {P}")
    if S < 0:
        raise ConfigError("S must be >= 0")
    if tile_bytes <= 0:
        raise ConfigError("tile_bytes must be > 0")
    if compute is not None and model.compute_intensity is None:
        raise ConfigError(f"model {model.name!r} has no compute_intensity; supply one for end-to-end runs")

    counts = np.zeros((P, model.E), dtype=np.int64)
    if skew == 0:
        counts[:] = balanced_route(S, model.E, model.k)
    else:
        ss = np.random.SeedSequence(seed)
        ranking = np.random.default_rng(ss.spawn(1)[0]).permutation(model.E)
        for pe, child in enumerate(ss.spawn(P + 1)[1:]):
            counts[pe] = zipf_route(S, model.E, skew, model.k, child, ranking=ranking)

    row_bytes = model.H * BYTES_PER_ELEMENT
    transfers: dict[int, list[Transfer]] = {}
    for src in range(P):
        out: list[Transfer] = []
        for e in range(model.E):
            tokens = int(counts[src, e])
            if tokens == 0:
                continue
            dst = expert_home(e, P)
            size = tokens * row_bytes
            remote = not cluster.same_node(src, dst)
            pieces = _split(size, tile_bytes) if tile_mode else [size]
            for i, piece in enumerate(pieces):
                out.append(Transfer(src, dst, e, piece, tokens if len(pieces) == 1 else 0, i, remote))
        out.sort(key=lambda t: (t.dst, t.expert, t.tile))
        transfers[src] = out
    return DispatchWorkload(model, cluster, S, skew, seed, tile_bytes, tile_mode, counts,
                            transfers, compute)


MICRO_MODES = ("put_only", "coupled", "combined")


def microbenchmark_workload(
    N: int,
    size: int,
    nodes: int,
    mode: str = "coupled",
    gpus_per_node: int = 4,
    source_pes: Optional[Sequence[int]] = None,
) -> DispatchWorkload:
    """Synthetic no-compute workload: N transfers per PE, destinations round-robin over remote PEs."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    if size <= 0:
        raise ConfigError("size must be > 0")
    if mode not in MICRO_MODES:
        raise ConfigError(f"unknown microbenchmark mode {mode!r}; choose from {MICRO_MODES}")
    cluster = ClusterConfig(nodes, gpus_per_node)
    if nodes < 2:
        raise ConfigError("the microbenchmark needs at least 2 nodes")
    model = ModelConfig("micro", H=max(1, size // BYTES_PER_ELEMENT), I=1, E=N, k=1)
    pes = range(cluster.P) if source_pes is None else source_pes
    transfers = {}
    for src in pes:
        remote = cluster.remote_pes(src)
        ts = [Transfer(src, remote[i % len(remote)], i, size, 0) for i in range(N)]
        transfers[src] = ts
    return DispatchWorkload(model, cluster, S=0, transfers=transfers, compute=None, micro_mode=mode)
