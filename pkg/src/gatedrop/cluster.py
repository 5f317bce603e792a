"""Expert-parallel cluster simulation.

Workers are logical entities in one process. Every byte that would cross a
link is written to a :class:`MessageLedger` instead of a socket, which makes
communication volume exactly countable and runs reproducible.

Per iteration the coordinator (worker 0) draws one bit, broadcasts it, and
every MoE layer of the step then runs either the normal all-to-all pipeline
or, when the bit is set, the local-only variant for the configured mode.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, InvalidConfigError, InvalidInputError
from .gating import GatingNetwork, gate_probs, hash_route_many, select_experts
from .moe import (
    Expert,
    RoutingPlan,
    assign_capacity,
    bypass_plan,
    combine_batch,
    expert_forward,
)
from .numerics import RandomStream, random_bits_at, uniform

BYTES_PER_VALUE = 2  # activations are sized as bfloat16 on the wire
DECISION_BYTES = 1
COORDINATOR = 0

COORDINATOR_STREAM = 1
JITTER_STREAM = 2


class Mode(str, enum.Enum):
    BASELINE = "baseline"
    GATE_DROP = "gate_drop"
    GATE_EXPERT_DROP = "gate_expert_drop"
    HASH = "hash"

    @classmethod
    def parse(cls, value) -> "Mode":
        try:
            return cls(value)
        except ValueError:
            raise InvalidConfigError(f"unknown mode {value!r}") from None

    @property
    def drops(self) -> bool:
        return self in (Mode.GATE_DROP, Mode.GATE_EXPERT_DROP)


class MessageKind(enum.IntEnum):
    DISPATCH = 0
    RETURN = 1
    BROADCAST = 2


# --- topology ---------------------------------------------------------------

@dataclass(frozen=True)
class ClusterTopology:
    num_workers: int
    placement: tuple[int, ...]
    experts_per_worker: int

    @property
    def num_experts(self) -> int:
        return len(self.placement)

    def experts_on(self, worker: int) -> list[int]:
        return [e for e, w in enumerate(self.placement) if w == worker]

    def local_mask(self, worker: int) -> np.ndarray:
        return np.asarray(self.placement) == worker


def place_experts(num_experts: int, num_workers: int) -> ClusterTopology:
    """Contiguous block placement: expert ``i`` lives on worker ``i // (N / M)``."""
    if num_workers < 1 or num_experts < 1 or num_experts % num_workers:
        raise InvalidConfigError(
            f"number of workers ({num_workers}) must divide number of experts ({num_experts})"
        )
    per = num_experts // num_workers
    return ClusterTopology(num_workers, tuple(i // per for i in range(num_experts)), per)


# --- decisions and broadcast ------------------------------------------------

@dataclass(frozen=True)
class IterationDecision:
    iteration: int
    drop_on: bool
    mode: Mode = Mode.BASELINE


def coordinator_stream(seed: int) -> RandomStream:
    return RandomStream(seed, COORDINATOR_STREAM)


def coordinator_decide(iteration: int, p: float, rng: RandomStream,
                       mode: Mode = Mode.GATE_DROP) -> IterationDecision:
    """Draw this iteration's drop bit: on with probability ``p``.

    Exactly one draw is consumed whatever the mode, so the coordinator's
    stream stays aligned across modes. Baseline and hash never drop.
    Inference callers pass ``p=0``; outputs are never rescaled.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"dropout rate must be in [0, 1], got {p}")
    mode = Mode.parse(mode)
    u = uniform(rng)
    return IterationDecision(iteration, bool(u < p) and mode.drops, mode)


# --- ledger -----------------------------------------------------------------

class LedgerRecord(NamedTuple):
    iteration: int
    source: int
    dest: int
    kind: MessageKind
    payload_bytes: int
    layer: int = 0
    pass_index: int = 0


_COLS = ("iteration", "source", "dest", "kind", "payload_bytes", "layer", "pass_index")


class MessageLedger:
    """Append-only log of simulated messages, stored column-wise."""

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._table: np.ndarray | None = None

    def add(self, iteration, source, dest, kind, payload_bytes, layer=0, pass_index=0):
        source = np.atleast_1d(np.asarray(source, dtype=np.int64))
        n = len(source)
        if n == 0:
            return
        chunk = np.empty((n, len(_COLS)), dtype=np.int64)
        chunk[:, 0] = iteration
        chunk[:, 1] = source
        chunk[:, 2] = dest
        chunk[:, 3] = int(kind)
        chunk[:, 4] = payload_bytes
        chunk[:, 5] = layer
        chunk[:, 6] = pass_index
        self._chunks.append(chunk)
        self._table = None

    @property
    def table(self) -> np.ndarray:
        if self._table is None:
            self._table = (np.concatenate(self._chunks) if self._chunks
                           else np.empty((0, len(_COLS)), dtype=np.int64))
        return self._table

    def __len__(self) -> int:
        return len(self.table)

    def records(self, **where) -> list[LedgerRecord]:
        rows = self.table[self._select(**where)]
        return [LedgerRecord(int(r[0]), int(r[1]), int(r[2]), MessageKind(int(r[3])),
                             int(r[4]), int(r[5]), int(r[6])) for r in rows]

    def _select(self, iteration=None, kind=None, layer=None, pass_index=None) -> np.ndarray:
        t = self.table
        sel = np.ones(len(t), dtype=bool)
        if iteration is not None:
            sel &= t[:, 0] == iteration
        if kind is not None:
            sel &= t[:, 3] == int(kind)
        if layer is not None:
            sel &= t[:, 5] == layer
        if pass_index is not None:
            sel &= t[:, 6] == pass_index
        return sel

    def total_bytes(self, **where) -> int:
        return int(self.table[self._select(**where), 4].sum())

    def count(self, **where) -> int:
        return int(self._select(**where).sum())

    def bytes_per_iteration(self, num_iterations: int, kinds=(MessageKind.DISPATCH, MessageKind.RETURN)) -> np.ndarray:
        t = self.table
        sel = np.isin(t[:, 3], [int(k) for k in kinds])
        return np.bincount(t[sel, 0], weights=t[sel, 4], minlength=num_iterations)[:num_iterations]

    def bytes_since(self, mark: int) -> int:
        return int(sum(c[:, 4].sum() for c in self._chunks[mark:]))

    def mark(self) -> int:
        """Position token for :meth:`replay_backward`."""
        return len(self._chunks)

    def replay_backward(self, since: int, pass_index: int) -> None:
        """Mirror the token traffic logged after ``since`` for a later pass.

        Gradients retrace the token permutation: upstream gradients follow the
        forward return path in reverse and input gradients follow the dispatch
        path in reverse, so the record multiset (kind, endpoints, bytes) repeats.
        """
        for chunk in self._chunks[since:]:
            rows = chunk[(chunk[:, 6] == 0) & (chunk[:, 3] != int(MessageKind.BROADCAST))].copy()
            if len(rows):
                rows[:, 6] = pass_index
                self._chunks.append(rows)
                self._table = None


def broadcast_decision(d: IterationDecision, topo: ClusterTopology,
                       ledger: MessageLedger | None) -> list[IterationDecision]:
    """Coordinator sends the one-bit decision to every other worker."""
    others = [w for w in range(topo.num_workers) if w != COORDINATOR]
    if ledger is not None:
        ledger.add(d.iteration, np.full(len(others), COORDINATOR), others,
                   MessageKind.BROADCAST, DECISION_BYTES)
    return [IterationDecision(d.iteration, d.drop_on, d.mode) for _ in range(topo.num_workers)]


# --- tokens, model, routing -------------------------------------------------

@dataclass
class TokenBatch:
    """Token rows with their origin worker and stable identifiers.

    ``token_ids`` double as batch order for capacity and as the key for jitter
    and hash routing, so results do not depend on how tokens are split
    across workers.
    """

    values: np.ndarray
    origin: np.ndarray
    token_ids: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InvalidInputError("token batch must be 2-D")
        n = len(self.values)
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=np.int64), (n,)).copy()
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.token_ids.shape != (n,):
            raise InvalidInputError("one token id per row required")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def split_batch(values: np.ndarray, num_workers: int, first_id: int = 0) -> list[TokenBatch]:
    """Split a global batch into contiguous per-worker batches."""
    n = len(values)
    if n % num_workers:
        raise InvalidConfigError(f"{n} tokens do not split evenly over {num_workers} workers")
    per = n // num_workers
    return [
        TokenBatch(values[w * per:(w + 1) * per], w, np.arange(first_id + w * per, first_id + (w + 1) * per))
        for w in range(num_workers)
    ]


def concat_batches(batches: list[TokenBatch]) -> TokenBatch:
    return TokenBatch(
        np.concatenate([b.values for b in batches]),
        np.concatenate([b.origin for b in batches]),
        np.concatenate([b.token_ids for b in batches]),
    )


@dataclass
class MoELayer:
    gate: GatingNetwork
    experts: list[Expert]

    def __post_init__(self):
        if len(self.experts) != self.gate.num_experts:
            raise InvalidInputError("one expert per gating row required")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.gate.dim


def jitter_tokens(values: np.ndarray, token_ids: np.ndarray, eps: float, seed: int) -> np.ndarray:
    """Token-keyed jitter: coordinate ``j`` of token ``t`` uses counter ``t * d + j``.

    Gives the same noise as :func:`gatedrop.gating.apply_jitter` with a
    stream positioned at ``t * d``.
    """
    if eps < 0:
        raise InvalidConfigError(f"jitter eps must be >= 0, got {eps}")
    if eps == 0:
        return values
    d = values.shape[1]
    counters = (token_ids[:, None] * d + np.arange(d)[None, :]).astype(np.uint64)
    u = (random_bits_at(seed, JITTER_STREAM, counters) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return (values * (1.0 - eps + 2.0 * eps * u)).astype(values.dtype)


@dataclass
class Routing:
    """Outcome of the gating stage for a batch (global order)."""

    plan: RoutingPlan
    probs: np.ndarray | None  # (T, N) softmax output, None when no gate was evaluated
    gate_inputs: np.ndarray | None
    unrestricted: np.ndarray  # token chose among all experts


def route(layer: MoELayer, batch: TokenBatch, topo: ClusterTopology, decision: IterationDecision,
          cap: int, *, seed: int = 0, jitter_eps: float = 0.0,
          enforce_capacity_on_drop: bool = True) -> Routing:
    """Gate every token of ``batch`` and apply capacity in token-id order."""
    mode = Mode.parse(decision.mode)
    n, N = len(batch), layer.num_experts
    if topo.num_experts != N:
        raise ContractViolation("topology and layer disagree on the number of experts")
    if batch.dim != layer.dim:
        raise InvalidInputError(f"token dimension {batch.dim} != model dimension {layer.dim}")

    if mode is Mode.GATE_EXPERT_DROP and decision.drop_on:
        return Routing(bypass_plan(n, N), None, None, np.zeros(n, dtype=bool))

    if mode is Mode.HASH:
        experts = hash_route_many(batch.token_ids, N)
        probs_sel = np.ones(n, dtype=batch.values.dtype)
        probs = z = None
        unrestricted = np.ones(n, dtype=bool)
    else:
        z = jitter_tokens(batch.values, batch.token_ids, jitter_eps, seed)
        probs = gate_probs(z, layer.gate)
        local = mode is Mode.GATE_DROP and decision.drop_on
        masks = np.asarray(topo.placement)[None, :] == batch.origin[:, None] if local else None
        experts, probs_sel = select_experts(probs, masks)
        unrestricted = np.full(n, not local)

    if decision.drop_on and not enforce_capacity_on_drop:
        cap = n
    order = np.argsort(batch.token_ids, kind="stable")
    status = np.empty(n, dtype=np.int8)
    status[order] = assign_capacity(experts[order], N, cap)
    plan = RoutingPlan(np.asarray(experts, dtype=np.int64), probs_sel, status, N, cap)
    return Routing(plan, probs, z, unrestricted)


def slice_plan(plan: RoutingPlan, rows: slice) -> RoutingPlan:
    return RoutingPlan(plan.experts[rows], plan.gate_probs[rows], plan.status[rows],
                       plan.num_experts, plan.capacity)


# --- all-to-all -------------------------------------------------------------

@dataclass
class Permutation:
    """Where each expert's input rows came from: (origin worker, row index) per row."""

    origin_worker: dict[int, np.ndarray] = field(default_factory=dict)
    origin_row: dict[int, np.ndarray] = field(default_factory=dict)
    rows_per_worker: list[int] = field(default_factory=list)
    iteration: int = 0
    layer: int = 0

    def remote_tokens(self, topo: ClusterTopology) -> int:
        """Tokens whose expert lives on another worker (one message each way)."""
        return int(sum((ow != topo.placement[e]).sum() for e, ow in self.origin_worker.items()))


def _token_bytes(d: int) -> int:
    return BYTES_PER_VALUE * d


def dispatch_all_to_all(batches: list[TokenBatch], plans: list[RoutingPlan], topo: ClusterTopology,
                        ledger: MessageLedger | None, *, iteration: int = 0, layer: int = 0):
    """Send every routed token to the worker holding its expert.

    Returns ``(inputs, permutation)`` where ``inputs[w]`` maps each expert on
    worker ``w`` to its stacked input rows. One ledger record per token that
    crosses workers; same-worker tokens are free.
    """
    if len(batches) != topo.num_workers or len(plans) != topo.num_workers:
        raise ContractViolation("need exactly one batch and one plan per worker")
    placement = np.asarray(topo.placement)
    perm = Permutation(rows_per_worker=[len(b) for b in batches], iteration=iteration, layer=layer)
    inputs: list[dict[int, np.ndarray]] = [dict() for _ in range(topo.num_workers)]
    d = batches[0].dim if batches else 0
    for w, (b, plan) in enumerate(zip(batches, plans)):
        if len(plan) != len(b):
            raise ContractViolation(f"worker {w}: plan covers {len(plan)} tokens, batch has {len(b)}")
        rows = np.flatnonzero(plan.routed)
        if ledger is not None:
            dest = placement[plan.experts[rows]]
            remote = dest != w
            ledger.add(iteration, np.full(int(remote.sum()), w), dest[remote],
                       MessageKind.DISPATCH, _token_bytes(d), layer)
    for e in range(topo.num_experts):
        ws, rs, xs = [], [], []
        for w, (b, plan) in enumerate(zip(batches, plans)):
            rows = np.flatnonzero(plan.routed & (plan.experts == e))
            ws.append(np.full(len(rows), w))
            rs.append(rows)
            xs.append(b.values[rows])
        perm.origin_worker[e] = np.concatenate(ws)
        perm.origin_row[e] = np.concatenate(rs)
        inputs[topo.placement[e]][e] = np.concatenate(xs) if xs else np.empty((0, d))
    return inputs, perm


def return_all_to_all(expert_outputs: list[dict[int, np.ndarray]], perm: Permutation | None,
                      topo: ClusterTopology, ledger: MessageLedger | None, d: int):
    """Send expert outputs home; rows land at their original batch positions.

    Returns one (T_w, d) array per worker; rows of tokens that were not
    routed are zero.
    """
    if perm is None:
        raise ContractViolation("return without a matching dispatch")
    dtype = np.float32
    for outs in expert_outputs:
        for v in outs.values():
            dtype = v.dtype
    result = [np.zeros((n, d), dtype=dtype) for n in perm.rows_per_worker]
    for e in range(topo.num_experts):
        owner = topo.placement[e]
        out = expert_outputs[owner].get(e)
        ow, orow = perm.origin_worker[e], perm.origin_row[e]
        if out is None or len(out) != len(ow):
            raise ContractViolation(f"expert {e}: output rows do not match the permutation")
        for w in np.unique(ow):
            sel = ow == w
            result[w][orow[sel]] = out[sel]
        if ledger is not None:
            remote = ow != owner
            ledger.add(perm.iteration, np.full(int(remote.sum()), owner), ow[remote],
                       MessageKind.RETURN, _token_bytes(d), perm.layer)
    return result


# --- one MoE layer across the cluster ---------------------------------------

@dataclass
class CommStats:
    dispatch_bytes: int = 0
    return_bytes: int = 0
    dispatch_messages: int = 0
    return_messages: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    expert_tokens: int = 0

    @property
    def token_bytes(self) -> int:
        return self.dispatch_bytes + self.return_bytes


@dataclass
class IterationResult:
    outputs: list[np.ndarray]
    plans: list[RoutingPlan]
    stats: CommStats
    routing: Routing


def moe_iteration(batches: list[TokenBatch], layer: MoELayer, topo: ClusterTopology,
                  decision: IterationDecision, cap: int, *, ledger: MessageLedger | None = None,
                  seed: int = 0, jitter_eps: float = 0.0, layer_index: int = 0,
                  enforce_capacity_on_drop: bool = True) -> IterationResult:
    """Run one MoE layer over all workers for one iteration."""
    mode = Mode.parse(decision.mode)
    if len(batches) != topo.num_workers:
        raise ContractViolation("need exactly one batch per worker")
    sizes = [len(b) for b in batches]
    bounds = np.cumsum([0] + sizes)
    n_in = int(bounds[-1])
    everything = concat_batches(batches)

    routing = route(layer, everything, topo, decision, cap, seed=seed, jitter_eps=jitter_eps,
                    enforce_capacity_on_drop=enforce_capacity_on_drop)
    plans = [slice_plan(routing.plan, slice(bounds[w], bounds[w + 1])) for w in range(topo.num_workers)]

    if mode is Mode.GATE_EXPERT_DROP and decision.drop_on:
        outputs = [b.values.copy() for b in batches]
        return IterationResult(outputs, plans, CommStats(tokens_in=n_in, tokens_out=n_in), routing)

    # with the drop bit set every routed token is local, so the all-to-all is skipped outright
    wire = None if decision.drop_on else ledger
    inputs, perm = dispatch_all_to_all(batches, plans, topo, wire, iteration=decision.iteration,
                                       layer=layer_index)
    expert_out: list[dict[int, np.ndarray]] = [dict() for _ in range(topo.num_workers)]
    expert_tokens = 0
    for w in range(topo.num_workers):
        for e, x in inputs[w].items():
            expert_out[w][e] = expert_forward(layer.experts[e], x).astype(x.dtype) if len(x) else x
            expert_tokens += len(x)
    returned = return_all_to_all(expert_out, perm, topo, wire, everything.dim)
    outputs = [combine_batch(b.values, r, p) for b, r, p in zip(batches, returned, plans)]

    stats = CommStats(tokens_in=n_in, tokens_out=sum(len(o) for o in outputs), expert_tokens=expert_tokens)
    if wire is not None:
        moved = perm.remote_tokens(topo)
        stats.dispatch_messages = stats.return_messages = moved
        stats.dispatch_bytes = stats.return_bytes = moved * _token_bytes(everything.dim)
    return IterationResult(outputs, plans, stats, routing)


# --- multi-layer step driver ------------------------------------------------

@dataclass
class StepResult:
    decisions: list[IterationDecision]
    worker_decisions: list[list[IterationDecision]]
    outputs: list[np.ndarray]
    layers: list[IterationResult]
    comm_bytes: int = 0  # everything logged for this step, broadcasts included

    @property
    def drop_on(self) -> bool:
        return self.decisions[0].drop_on


class ClusterSimulator:
    """Drives decide -> broadcast -> MoE layers -> backward replay, one step at a time.

    ``per_layer_decisions`` draws a separate bit for every MoE layer instead of
    one per iteration. ``passes_per_step`` > 1 replays the forward token
    traffic once per extra pass.
    """

    def __init__(self, layers: list[MoELayer], topo: ClusterTopology, mode, p: float, *,
                 seed: int = 0, cf: float = 1.0, jitter_eps: float = 0.0, passes_per_step: int = 1,
                 per_layer_decisions: bool = False, enforce_capacity_on_drop: bool = True,
                 ledger: MessageLedger | None = None):
        self.mode = Mode.parse(mode)
        if not 0.0 <= p <= 1.0:
            raise InvalidConfigError(f"dropout rate must be in [0, 1], got {p}")
        if passes_per_step < 1:
            raise InvalidConfigError("passes_per_step must be >= 1")
        self.layers = layers
        self.topo = topo
        self.p = p
        self.seed = seed
        self.cf = cf
        self.jitter_eps = jitter_eps
        self.passes_per_step = passes_per_step
        self.per_layer_decisions = per_layer_decisions
        self.enforce_capacity_on_drop = enforce_capacity_on_drop
        self.ledger = ledger if ledger is not None else MessageLedger()
        self.rng = coordinator_stream(seed)

    def _decide(self, iteration: int):
        d = coordinator_decide(iteration, self.p, self.rng, self.mode)
        # baseline/hash runs have nothing to agree on, so no broadcast
        copies = (broadcast_decision(d, self.topo, self.ledger) if self.mode.drops
                  else [d] * self.topo.num_workers)
        return d, copies

    def step(self, iteration: int, batches: list[TokenBatch]) -> StepResult:
        from .moe import capacity

        total = sum(len(b) for b in batches)
        cap = capacity(total, self.topo.num_experts, self.cf)
        mark = self.ledger.mark()
        decisions, worker_views, results = [], [], []
        for k, layer in enumerate(self.layers):
            if k == 0 or self.per_layer_decisions:
                d, copies = self._decide(iteration)
                decisions.append(d)
                worker_views.append(copies)
            # every worker acts on its own copy; they are identical by construction
            res = moe_iteration(batches, layer, self.topo, worker_views[-1][COORDINATOR], cap,
                                ledger=self.ledger, seed=self.seed, jitter_eps=self.jitter_eps,
                                layer_index=k, enforce_capacity_on_drop=self.enforce_capacity_on_drop)
            results.append(res)
            batches = [TokenBatch(o, b.origin, b.token_ids) for o, b in zip(res.outputs, batches)]
        for extra in range(1, self.passes_per_step):
            self.ledger.replay_backward(mark, extra)
        return StepResult(decisions, worker_views, [b.values for b in batches], results,
                          self.ledger.bytes_since(mark))


def uniform_gate(num_experts: int, d: int, rng: RandomStream, dtype=np.float32) -> GatingNetwork:
    """Router whose argmax is uniform over experts for isotropic Gaussian tokens.

    Rows are orthonormal when ``N <= d`` (exactly uniform by symmetry),
    otherwise unit-norm random directions (approximately uniform).
    """
    g = rng.normals(num_experts * d).reshape(num_experts, d)
    if num_experts <= d:
        q, _ = np.linalg.qr(g.T)
        w = q.T[:num_experts]
    else:
        w = g / np.linalg.norm(g, axis=1, keepdims=True)
    return GatingNetwork(w.astype(dtype))


def random_expert(d: int, d_ff: int, rng: RandomStream, dtype=np.float32) -> Expert:
    w1 = rng.normals(d_ff * d).reshape(d_ff, d) * np.sqrt(2.0 / d)
    w2 = rng.normals(d * d_ff).reshape(d, d_ff) * np.sqrt(1.0 / d_ff)
    return Expert(w1.astype(dtype), w2.astype(dtype))


def random_layer(num_experts: int, d: int, d_ff: int, seed: int, stream_id: int = 100,
                 dtype=np.float32) -> MoELayer:
    rng = RandomStream(seed, stream_id)
    gate = uniform_gate(num_experts, d, rng, dtype)
    return MoELayer(gate, [random_expert(d, d_ff, rng, dtype) for _ in range(num_experts)])


def gaussian_tokens(n: int, d: int, seed: int, iteration: int, dtype=np.float32) -> np.ndarray:
    rng = RandomStream(seed, (3 << 40) | iteration)
    return rng.normals(n * d).reshape(n, d).astype(dtype)
