"""Discrete-event model of GPU-initiated put-with-signal over proxy-based and
GPU-direct RDMA transports, with decoupled signaling and NIC-side ordering."""

from .metrics import (AlphaBetaFit, conservation_check, fence_accounting, fit_alpha_beta,
                      signaling_efficiency, speedup_decomposition, verify_ordering)
from .protocols import (COMBINED, DECOUPLED_ONLY, NIC_ORDER_ONLY, PUT_ONLY_PROTOCOL, VANILLA,
                        Dispatcher, ProtocolConfig, SignalGroup, assign_groups, run_dispatch,
                        run_microbenchmark)
from .sim import CausalityError, ConfigError, ModelError, Simulator
from .trace import RunTrace
from .transport import LATENCY_PRESETS, LatencyModel, Transport, WorkRequest, latency_preset
from .workload import (MODEL_PRESETS, ClusterConfig, ComputeModel, DispatchWorkload, ModelConfig,
                       build_dispatch, message_size, microbenchmark_workload, model_preset,
                       remote_transfer_count, zipf_route)

__version__ = "0.1.0"
