"""Partial information decomposition of multimodal model predictions."""

from ._core import (
    CapabilityError,
    ConsistencyError,
    DegenerateError,
    DomainError,
    Error,
    FormatError,
    InfeasibleError,
    NumericError,
    brute_force_pid,
    decompose,
    estimate_continuous,
    gate_joint,
    pid_shares,
    spearman,
    split_sizes,
    threshold_regularize,
)

__all__ = [
    "CapabilityError",
    "ConsistencyError",
    "DegenerateError",
    "DomainError",
    "Error",
    "FormatError",
    "InfeasibleError",
    "NumericError",
    "brute_force_pid",
    "decompose",
    "estimate_continuous",
    "gate_joint",
    "pid_shares",
    "spearman",
    "split_sizes",
    "threshold_regularize",
]
