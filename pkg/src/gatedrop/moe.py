"""Expert FFNs, per-expert capacity, routing plans and the output combine."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidInputError
from .numerics import as_matrix


class TokenStatus(enum.IntEnum):
    ROUTED = 0
    OVERFLOW_BYPASS = 1
    DROP_BYPASS = 2


@dataclass
class Expert:
    """Two-layer ReLU feedforward network: ``w2 @ relu(w1 @ x)``.

    ``w1`` is (d_ff, d) and ``w2`` is (d, d_ff).
    """

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        w1, w2 = np.asarray(self.w1), np.asarray(self.w2)
        dtype = w1.dtype if w1.dtype.kind == "f" else np.float32
        self.w1 = as_matrix(w1, dtype=dtype)
        self.w2 = as_matrix(w2, rows=self.w1.shape[1], cols=self.w1.shape[0], dtype=dtype)

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


def expert_forward(e: Expert, x) -> np.ndarray:
    """Apply one expert to a token of shape (d,) or a batch of shape (T, d)."""
    x = np.asarray(x)
    if x.shape[-1] != e.dim:
        raise InvalidInputError(f"token dimension {x.shape[-1]} != expert dimension {e.dim}")
    h = np.maximum(x @ e.w1.T, 0)
    return h @ e.w2.T


def capacity(total_tokens: int, num_experts: int, cf: float) -> int:
    """Per-expert token budget ``ceil(cf * T / N)``."""
    if num_experts < 1 or cf <= 0 or total_tokens < 0:
        raise InvalidInputError("capacity needs T >= 0, N >= 1 and cf > 0")
    # round before ceil so that e.g. 1.0 * 7 / 7 does not become 2 through fp noise
    return int(math.ceil(round(cf * total_tokens / num_experts, 9)))


@dataclass(frozen=True)
class RoutingPlan:
    """Per-token expert, gate probability and status for one MoE layer call."""

    experts: np.ndarray
    gate_probs: np.ndarray
    status: np.ndarray
    num_experts: int
    capacity: int

    def __len__(self) -> int:
        return len(self.experts)

    @property
    def routed(self) -> np.ndarray:
        return self.status == TokenStatus.ROUTED

    def routed_counts(self) -> np.ndarray:
        return np.bincount(self.experts[self.routed], minlength=self.num_experts)


def assign_capacity(experts: np.ndarray, num_experts: int, cap: int) -> np.ndarray:
    """Status per token: the first ``cap`` tokens of each expert, in batch order, are routed."""
    experts = np.asarray(experts, dtype=np.int64)
    if len(experts) and (experts.min() < 0 or experts.max() >= num_experts):
        raise InvalidInputError("expert index out of range")
    order = np.argsort(experts, kind="stable")
    sorted_e = experts[order]
    starts = np.searchsorted(sorted_e, sorted_e, side="left")
    rank = np.empty(len(experts), dtype=np.int64)
    rank[order] = np.arange(len(experts)) - starts
    return np.where(rank < cap, TokenStatus.ROUTED, TokenStatus.OVERFLOW_BYPASS).astype(np.int8)


def build_plan_arrays(experts, gate_probs, num_experts: int, cap: int) -> RoutingPlan:
    if cap < 0:
        raise InvalidInputError("capacity must be >= 0")
    experts = np.asarray(experts, dtype=np.int64)
    status = assign_capacity(experts, num_experts, cap)
    return RoutingPlan(experts, np.asarray(gate_probs), status, num_experts, cap)


def build_plan(decisions, num_experts: int, cap: int) -> RoutingPlan:
    """Routing plan from per-token :class:`~gatedrop.gating.GateDecision` objects."""
    experts = [d.expert_index for d in decisions]
    probs = [d.gate_prob for d in decisions]
    return build_plan_arrays(experts, np.array(probs, dtype=np.float64), num_experts, cap)


def bypass_plan(num_tokens: int, num_experts: int) -> RoutingPlan:
    """Plan in which every token skips the layer (expert drop)."""
    return RoutingPlan(
        experts=np.zeros(num_tokens, dtype=np.int64),
        gate_probs=np.zeros(num_tokens),
        status=np.full(num_tokens, TokenStatus.DROP_BYPASS, dtype=np.int8),
        num_experts=num_experts,
        capacity=0,
    )


def combine(x, expert_out, gate_prob: float, status) -> np.ndarray:
    """Layer output for one token: ``gate_prob * expert_out`` if routed, else ``x``."""
    status = TokenStatus(int(status))
    if status == TokenStatus.ROUTED:
        if expert_out is None:
            raise ContractViolation("routed token has no expert output")
        return gate_prob * np.asarray(expert_out)
    if expert_out is not None:
        raise ContractViolation("bypassed token must not carry an expert output")
    return np.asarray(x)


def combine_batch(x: np.ndarray, expert_out: np.ndarray, plan: RoutingPlan) -> np.ndarray:
    """Vectorised :func:`combine`; ``expert_out`` rows of bypassed tokens are ignored."""
    routed = plan.routed
    gp = plan.gate_probs.astype(x.dtype)[:, None]
    return np.where(routed[:, None], gp * expert_out, x).astype(x.dtype)
