"""Expert-parallel MoE routing simulator with gating dropout and expert drop."""

from .cluster import ClusterSimulator, Mode, MessageLedger, moe_iteration, place_experts
from .costmodel import CostParams, alltoall_bytes, expected_step_comm_bytes, throughput_estimate
from .errors import (
    ContractViolation,
    EmptyCandidateError,
    GateDropError,
    InvalidConfigError,
    InvalidInputError,
)

__all__ = [
    "ClusterSimulator",
    "ContractViolation",
    "CostParams",
    "EmptyCandidateError",
    "GateDropError",
    "InvalidConfigError",
    "InvalidInputError",
    "MessageLedger",
    "Mode",
    "alltoall_bytes",
    "expected_step_comm_bytes",
    "moe_iteration",
    "place_experts",
    "throughput_estimate",
]
