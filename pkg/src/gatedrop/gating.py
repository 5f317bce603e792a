"""Top-1 gating: jitter, routing probabilities, expert selection, balance loss, hash routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .numerics import RandomStream, argmax_masked, as_matrix, random_bits, random_bits_at, softmax

DEFAULT_JITTER_EPS = 0.01
_HASH_STREAM = 0x6A09E667F3BCC908


@dataclass
class GatingNetwork:
    """Linear router; ``weight`` has shape (N, d)."""

    weight: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight)
        self.weight = as_matrix(w, dtype=w.dtype if w.dtype.kind == "f" else np.float32)
        if self.weight.shape[0] < 1 or self.weight.shape[1] < 1:
            raise InvalidInputError("gating weight must be at least 1x1")

    @property
    def num_experts(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True)
class GateDecision:
    expert_index: int
    gate_prob: float
    full_probs: np.ndarray


def jitter_factors(shape, eps: float, rng: RandomStream) -> np.ndarray:
    """Multiplicative noise in [1 - eps, 1 + eps], drawn in row-major order."""
    if eps < 0:
        raise InvalidConfigError(f"jitter eps must be >= 0, got {eps}")
    n = int(np.prod(shape))
    if eps == 0:
        rng.counter += n
        return np.ones(shape)
    u = rng.uniforms(n).reshape(shape)
    return 1.0 - eps + 2.0 * eps * u


def apply_jitter(x, eps: float, rng: RandomStream) -> np.ndarray:
    """Jitter a token (or a batch of tokens) for the gating input only.

    Always consumes one draw per coordinate, even when ``eps`` is zero, so
    the stream position does not depend on the noise level.
    """
    x = np.asarray(x)
    factors = jitter_factors(x.shape, eps, rng)
    return (x * factors).astype(x.dtype)


def gate_probs(x, g: GatingNetwork) -> np.ndarray:
    """softmax(W_r x) for a token, or row-wise for a (T, d) batch."""
    x = np.asarray(x)
    if x.shape[-1] != g.dim:
        raise InvalidInputError(f"token dimension {x.shape[-1]} != gating dimension {g.dim}")
    return softmax(x @ g.weight.T)


def select_expert(probs, local_mask=None) -> GateDecision:
    """Top-1 selection, optionally restricted to ``local_mask``.

    The returned gate probability is read straight from ``probs``; it is not
    renormalised over the admissible experts.
    """
    probs = np.asarray(probs)
    idx = argmax_masked(probs, local_mask)
    return GateDecision(expert_index=idx, gate_prob=float(probs[idx]), full_probs=probs)


def select_experts(probs: np.ndarray, masks: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`select_expert`: returns (expert indices, gate probabilities)."""
    idx = argmax_masked(probs, masks)
    return idx, probs[np.arange(len(idx)), idx]


def balance_loss(assign_fractions, mean_probs, alpha: float) -> float:
    """Switch-style auxiliary loss ``alpha * N * sum_i f_i * P_i``."""
    f = np.asarray(assign_fractions, dtype=np.float64)
    P = np.asarray(mean_probs, dtype=np.float64)
    if f.shape != P.shape or f.ndim != 1:
        raise InvalidInputError(f"length mismatch: {f.shape} vs {P.shape}")
    if alpha < 0:
        raise InvalidConfigError(f"alpha must be >= 0, got {alpha}")
    return float(alpha * len(f) * np.dot(f, P))


def hash_route(token_id: int, num_experts: int) -> int:
    """Fixed pseudo-random expert for a token identifier.

    The identifier is a position in the token stream, never the embedding,
    so routing is unaffected by jitter or by training.
    """
    if num_experts < 1:
        raise InvalidConfigError("need at least one expert")
    return random_bits(0, _HASH_STREAM, int(token_id)) % num_experts


def hash_route_many(token_ids, num_experts: int) -> np.ndarray:
    if num_experts < 1:
        raise InvalidConfigError("need at least one expert")
    bits = random_bits_at(0, _HASH_STREAM, np.asarray(token_ids, dtype=np.uint64))
    return (bits % np.uint64(num_experts)).astype(np.int64)
