"""Multi-branch low-rank adapters with shared kernels."""

from ._core import (
    ColinAdapter,
    FusedAdapter,
    SimConfig,
    adapter_backward,
    adapter_forward,
    adapter_from_json,
    adapter_to_json,
    compose_weight,
    delta_w,
    fuse,
    gelu,
    orthogonal_loss,
    param_count,
    run_sim,
    run_sim_single,
    svd,
)

__all__ = [
    "ColinAdapter",
    "FusedAdapter",
    "SimConfig",
    "adapter_backward",
    "adapter_forward",
    "adapter_from_json",
    "adapter_to_json",
    "compose_weight",
    "delta_w",
    "fuse",
    "gelu",
    "orthogonal_loss",
    "param_count",
    "run_sim",
    "run_sim_single",
    "svd",
]
