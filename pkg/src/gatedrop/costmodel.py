"""Analytical communication and throughput model (latency + bandwidth).

Every worker holds ``tokens_per_worker`` tokens per step and talks to the
other ``M - 1`` workers in each all-to-all. Under uniform routing a fraction
``(M - 1) / M`` of tokens leaves its worker, and every MoE layer does a
dispatch and a return per pass.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cluster import BYTES_PER_VALUE, Mode
from .errors import InvalidConfigError


def alltoall_bytes(B: int, L: int, d: int) -> int:
    """Bytes moved by one all-to-all over ``B`` sequences of ``L`` tokens of width ``d``."""
    if min(B, L, d) < 0:
        raise InvalidConfigError("batch, length and width must be nonnegative")
    return BYTES_PER_VALUE * B * L * d


def expected_step_comm_bytes(p: float, B: int, L: int, d: int, moe_layers: int,
                             passes_per_step: int, M: int) -> float:
    """Expected token bytes on the wire per training step, cluster-wide."""
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"dropout rate must be in [0, 1], got {p}")
    if M < 1:
        raise InvalidConfigError("need at least one worker")
    return (1.0 - p) * alltoall_bytes(B, L, d) * 2 * moe_layers * passes_per_step * (M - 1) / M


@dataclass(frozen=True)
class CostParams:
    """Cluster and workload constants.

    ``compute_time_per_token_per_layer`` covers forward and backward work of
    one worker on one token in one layer. ``total_layers`` defaults to twice
    the MoE layers (every other FFN is an MoE layer). Hash routing skips
    ``gate_time_per_token_per_layer``.
    """

    M: int = 4
    d: int = 16
    tokens_per_worker: int = 128
    link_bandwidth: float = 12.5e9  # bytes/s, 100 Gb/s
    per_message_latency: float = 5e-6
    compute_time_per_token_per_layer: float = 5e-6
    moe_layers: int = 1
    passes_per_step: int = 2
    total_layers: int | None = None
    gate_time_per_token_per_layer: float = 5e-8

    def __post_init__(self):
        if self.M < 1 or self.d < 1 or self.tokens_per_worker < 1:
            raise InvalidConfigError("M, d and tokens_per_worker must be positive")
        if self.link_bandwidth <= 0 or self.compute_time_per_token_per_layer <= 0:
            raise InvalidConfigError("bandwidth and compute time must be positive")
        if self.per_message_latency < 0 or self.gate_time_per_token_per_layer < 0:
            raise InvalidConfigError("latency and gate time must be nonnegative")
        if self.moe_layers < 1 or self.passes_per_step < 1:
            raise InvalidConfigError("moe_layers and passes_per_step must be positive")
        if self.total_layers is not None and self.total_layers < self.moe_layers:
            raise InvalidConfigError("total_layers must be at least moe_layers")

    @property
    def layers(self) -> int:
        return self.total_layers if self.total_layers is not None else 2 * self.moe_layers

    @property
    def step_tokens(self) -> int:
        return self.M * self.tokens_per_worker


@dataclass(frozen=True)
class ThroughputReport:
    tokens_per_second: float
    comm_seconds_per_step: float
    compute_seconds_per_step: float


def throughput_estimate(params: CostParams, p: float, mode=Mode.GATE_DROP) -> ThroughputReport:
    mode = Mode.parse(mode)
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"dropout rate must be in [0, 1], got {p}")
    if not mode.drops:
        p = 0.0
    c = params
    wire = expected_step_comm_bytes(p, c.step_tokens, 1, c.d, c.moe_layers, c.passes_per_step, c.M)
    # workers send in parallel, each over its own link
    comm = (wire / c.M / c.link_bandwidth
            + (1.0 - p) * c.per_message_latency * (c.M - 1) * 2 * c.moe_layers * c.passes_per_step)

    skipped = p if mode is Mode.GATE_EXPERT_DROP else 0.0
    compute = c.tokens_per_worker * c.compute_time_per_token_per_layer * (c.layers - skipped * c.moe_layers)
    if mode is not Mode.HASH:
        compute += c.tokens_per_worker * c.gate_time_per_token_per_layer * c.moe_layers * (1.0 - skipped)
    return ThroughputReport(c.step_tokens / (comm + compute), comm, compute)


def no_alltoall_throughput(params: CostParams) -> float:
    """Baseline with the all-to-all removed and nothing else changed."""
    r = throughput_estimate(params, 0.0, Mode.BASELINE)
    return params.step_tokens / r.compute_seconds_per_step


def relative_improvement(params: CostParams) -> float:
    """Throughput gain of skipping every all-to-all over the baseline."""
    return no_alltoall_throughput(params) / throughput_estimate(params, 0.0, Mode.BASELINE).tokens_per_second - 1.0
