"""Desk-scale training of one MoE layer plus a linear head, with hand-written gradients.

The data is a synthetic clustered regression task: each cluster has its own
linear target map, so an expert that specialises on a cluster can fit it.
Gradients follow the usual top-1 treatment: the discrete argmax gets none,
the selected gate probability and the chosen expert get the rest.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import (
    ClusterSimulator,
    ClusterTopology,
    IterationDecision,
    MoELayer,
    Mode,
    TokenBatch,
    place_experts,
    random_expert,
    route,
    split_batch,
)
from .errors import ContractViolation, InvalidConfigError, InvalidInputError
from .gating import GatingNetwork, balance_loss
from .moe import capacity
from .numerics import RandomStream

log = logging.getLogger(__name__)

DEFAULT_P = {Mode.BASELINE: 0.0, Mode.HASH: 0.0, Mode.GATE_DROP: 0.3, Mode.GATE_EXPERT_DROP: 0.2}

_TASK_STREAM = 200
_INIT_STREAM = 300
_BATCH_STREAM = 1 << 41
_EVAL_STREAM = 1 << 42


@dataclass
class HyperParams:
    mode: Mode = Mode.BASELINE
    p: float | None = None
    cf_train: float = 1.0
    cf_eval: float = 2.0
    alpha: float = 0.01
    lr_base: float = 0.03
    warmup: int = 5000
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    steps: int = 2000
    jitter_eps: float = 0.01

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.p is None:
            self.p = DEFAULT_P[self.mode]
        if not 0.0 <= self.p <= 1.0:
            raise InvalidConfigError(f"p must be in [0, 1], got {self.p}")
        if self.cf_train <= 0 or self.cf_eval <= 0:
            raise InvalidConfigError("capacity factors must be positive")
        if self.alpha < 0 or self.jitter_eps < 0:
            raise InvalidConfigError("alpha and jitter_eps must be nonnegative")
        if self.warmup < 1 or self.steps < 0:
            raise InvalidConfigError("warmup must be >= 1 and steps >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("Adam betas must be in [0, 1)")


def lr_at(t: int, hp: HyperParams) -> float:
    """Linear warm-up to ``lr_base`` then inverse square-root decay."""
    if t < 1:
        raise InvalidInputError(f"step must be >= 1, got {t}")
    if t < hp.warmup:
        return hp.lr_base * t / hp.warmup
    return hp.lr_base * math.sqrt(hp.warmup / t)


# --- data -------------------------------------------------------------------

@dataclass
class SyntheticTask:
    """Gaussian clusters, each with its own linear regression target."""

    num_clusters: int
    d: int
    out_dim: int
    seed: int
    noise: float = 0.05
    spread: float = 3.0
    means: np.ndarray = field(init=False)
    maps: np.ndarray = field(init=False)

    def __post_init__(self):
        rng = RandomStream(self.seed, _TASK_STREAM)
        self.means = rng.normals(self.num_clusters * self.d).reshape(self.num_clusters, self.d) * self.spread
        self.maps = (rng.normals(self.num_clusters * self.out_dim * self.d)
                     .reshape(self.num_clusters, self.out_dim, self.d) / math.sqrt(self.d))

    def sample(self, n: int, stream_id: int, dtype=np.float32):
        """``(x, y, cluster)`` for ``n`` tokens drawn from stream ``stream_id``."""
        rng = RandomStream(self.seed, stream_id)
        k = np.minimum((rng.uniforms(n) * self.num_clusters).astype(np.int64), self.num_clusters - 1)
        x = self.means[k] + rng.normals(n * self.d).reshape(n, self.d)
        y = np.einsum("nij,nj->ni", self.maps[k], x) + self.noise * rng.normals(n * self.out_dim).reshape(n, self.out_dim)
        return x.astype(dtype), y.astype(dtype), k


# --- model ------------------------------------------------------------------

@dataclass
class ToyModel:
    layer: MoELayer
    head_w: np.ndarray  # (out_dim, d)
    head_b: np.ndarray  # (out_dim,)

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors by name; the arrays are the live storage."""
        p = {"gate": self.layer.gate.weight}
        for i, e in enumerate(self.layer.experts):
            p[f"expert{i}.w1"] = e.w1
            p[f"expert{i}.w2"] = e.w2
        p["head.w"] = self.head_w
        p["head.b"] = self.head_b
        return p

    def astype(self, dtype) -> "ToyModel":
        from .moe import Expert

        layer = MoELayer(GatingNetwork(self.layer.gate.weight.astype(dtype)),
                         [Expert(e.w1.astype(dtype), e.w2.astype(dtype)) for e in self.layer.experts])
        return ToyModel(layer, self.head_w.astype(dtype), self.head_b.astype(dtype))


def init_model(num_experts: int, d: int, d_ff: int, out_dim: int, seed: int, dtype=np.float32) -> ToyModel:
    rng = RandomStream(seed, _INIT_STREAM)
    gate = GatingNetwork((rng.normals(num_experts * d).reshape(num_experts, d) * 0.1).astype(dtype))
    experts = [random_expert(d, d_ff, rng, dtype) for _ in range(num_experts)]
    head_w = (rng.normals(out_dim * d).reshape(out_dim, d) / math.sqrt(d)).astype(dtype)
    return ToyModel(MoELayer(gate, experts), head_w, np.zeros(out_dim, dtype=dtype))


# --- loss and gradients -----------------------------------------------------

@dataclass
class LossParts:
    total: float
    task: float
    balance: float  # unscaled N * sum f_i P_i; the total uses alpha times this
    outputs: np.ndarray  # MoE layer outputs in batch order
    assignment: np.ndarray  # routed-token count per expert


def loss_and_grads(model: ToyModel, batch: TokenBatch, targets: np.ndarray, hp: HyperParams,
                   decision: IterationDecision, topo: ClusterTopology, cap: int, *, seed: int = 0,
                   jitter_eps: float | None = None, with_balance: bool = True):
    """Mean squared error of the head output plus ``alpha`` times the balance loss.

    Returns ``(LossParts, grads)`` where ``grads`` has the keys of
    :meth:`ToyModel.params`. Routing is recomputed here exactly as the
    cluster simulation does it (same jitter, same capacity order).
    """
    layer = model.layer
    N = layer.num_experts
    x = batch.values
    if targets.shape != (len(x), model.head_w.shape[0]):
        raise ContractViolation(f"targets shape {targets.shape} does not match batch and head")
    eps = hp.jitter_eps if jitter_eps is None else jitter_eps
    routing = route(layer, batch, topo, decision, cap, seed=seed, jitter_eps=eps)
    plan = routing.plan
    routed = plan.routed

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    y = x.copy()
    cache = {}
    for e in range(N):
        rows = np.flatnonzero(routed & (plan.experts == e))
        if not len(rows):
            continue
        ex = layer.experts[e]
        h = x[rows] @ ex.w1.T
        a = np.maximum(h, 0)
        o = a @ ex.w2.T
        g = plan.gate_probs[rows].astype(x.dtype)
        y[rows] = g[:, None] * o
        cache[e] = (rows, h, a, o, g)

    pred = y @ model.head_w.T + model.head_b
    diff = pred - targets
    task = float(np.mean(diff * diff))

    bal = 0.0
    dlogits = None
    if routing.probs is not None:
        probs = routing.probs
        n = len(probs)
        # assignment fraction uses the gate's choice before capacity is applied
        f = np.bincount(plan.experts, minlength=N) / n
        P = probs.mean(axis=0)
        bal = balance_loss(f, P, 1.0)
        dlogits = np.zeros_like(probs)
        if with_balance and hp.alpha > 0:
            fp = probs @ f.astype(probs.dtype)
            dlogits += (hp.alpha * N / n) * probs * (f.astype(probs.dtype)[None, :] - fp[:, None])

    dpred = (2.0 / diff.size) * diff
    grads["head.w"] = dpred.T @ y
    grads["head.b"] = dpred.sum(axis=0)
    dy = dpred @ model.head_w

    for e, (rows, h, a, o, g) in cache.items():
        ex = layer.experts[e]
        dyr = dy[rows]
        do = g[:, None] * dyr
        grads[f"expert{e}.w2"] = do.T @ a
        dh = (do @ ex.w2) * (h > 0)
        grads[f"expert{e}.w1"] = dh.T @ x[rows]
        if dlogits is not None:
            dg = np.sum(dyr * o, axis=1)
            pr = routing.probs[rows]
            # d p_e / d logit_j = p_e (delta_ej - p_j)
            local = -pr * (dg * g)[:, None]
            local[np.arange(len(rows)), e] += dg * g
            dlogits[rows] += local

    if dlogits is not None:
        grads["gate"] = dlogits.T @ routing.gate_inputs

    total = task + (hp.alpha * bal if with_balance else 0.0)
    assignment = np.bincount(plan.experts[routed], minlength=N)
    return LossParts(total, task, bal, y, assignment), grads


# --- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam; updates ``params`` in place and returns the new state."""
    if params.keys() != grads.keys():
        raise ContractViolation("parameter and gradient names differ")
    t = state.step + 1
    m_new, v_new = {}, {}
    for k, w in params.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ContractViolation(f"{k}: gradient shape {g.shape} != parameter shape {w.shape}")
        m = beta1 * state.m.get(k, np.zeros_like(w)) + (1 - beta1) * g
        v = beta2 * state.v.get(k, np.zeros_like(w)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        w -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(w.dtype)
        m_new[k], v_new[k] = m.astype(w.dtype), v.astype(w.dtype)
    return AdamState(t, m_new, v_new)


# --- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    d: int = 16
    d_ff: int = 64
    N: int = 8
    M: int = 4
    B: int = 16
    L: int = 32
    out_dim: int | None = None
    passes_per_step: int = 1
    eval_tokens: int = 1024
    hp: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if min(self.d, self.d_ff, self.N, self.M, self.B, self.L) < 1:
            raise InvalidConfigError("sizes must be positive")
        if self.N % self.M:
            raise InvalidConfigError(f"M={self.M} must divide N={self.N}")
        if (self.B * self.L) % self.M:
            raise InvalidConfigError("B*L must be divisible by M")
        if self.eval_tokens % self.M:
            raise InvalidConfigError("eval_tokens must be divisible by M")


@dataclass
class StepMetrics:
    step: int
    loss: float
    balance_loss: float
    drop_on: bool
    comm_bytes: int
    lr: float
    expert_entropy: float


@dataclass
class MetricsLog:
    rows: list[StepMetrics] = field(default_factory=list)
    initial_eval_loss: float = float("nan")
    final_eval_loss: float = float("nan")
    final_assignment: np.ndarray | None = None

    @property
    def on_fraction(self) -> float:
        return float(np.mean([r.drop_on for r in self.rows])) if self.rows else 0.0

    @property
    def finite(self) -> bool:
        vals = [r.loss for r in self.rows] + [self.initial_eval_loss, self.final_eval_loss]
        return all(math.isfinite(v) for v in vals)


def assignment_entropy(counts) -> float:
    """Entropy (nats) of the token share per expert; 0 for an empty assignment."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    q = counts[counts > 0] / total
    return float(-(q * np.log(q)).sum())


def evaluate(model: ToyModel, task: SyntheticTask, cfg: TrainConfig, topo: ClusterTopology):
    """Task loss on a fixed held-out batch: drop off, eval capacity, no jitter, no rescaling."""
    x, y, _ = task.sample(cfg.eval_tokens, _EVAL_STREAM, model.head_w.dtype)
    batch = TokenBatch(x, np.repeat(np.arange(cfg.M), cfg.eval_tokens // cfg.M), np.arange(cfg.eval_tokens))
    decision = IterationDecision(-1, False, cfg.hp.mode)
    cap = capacity(cfg.eval_tokens, cfg.N, cfg.hp.cf_eval)
    parts, _ = loss_and_grads(model, batch, y, cfg.hp, decision, topo, cap, seed=cfg.seed,
                              jitter_eps=0.0, with_balance=False)
    return parts


def train(cfg: TrainConfig, model: ToyModel | None = None) -> tuple[MetricsLog, ToyModel]:
    """Run ``cfg.hp.steps`` steps; returns the metrics log and the trained model."""
    hp = cfg.hp
    out_dim = cfg.out_dim or cfg.d
    topo = place_experts(cfg.N, cfg.M)
    task = SyntheticTask(cfg.N, cfg.d, out_dim, cfg.seed)
    if model is None:
        model = init_model(cfg.N, cfg.d, cfg.d_ff, out_dim, cfg.seed)
    sim = ClusterSimulator([model.layer], topo, hp.mode, hp.p, seed=cfg.seed, cf=hp.cf_train,
                           jitter_eps=hp.jitter_eps, passes_per_step=cfg.passes_per_step)
    n = cfg.B * cfg.L
    cap = capacity(n, cfg.N, hp.cf_train)
    state = AdamState()
    metrics = MetricsLog(initial_eval_loss=evaluate(model, task, cfg, topo).task)
    params = model.params()

    for it in range(hp.steps):
        x, y, _ = task.sample(n, _BATCH_STREAM | it)
        batches = split_batch(x, cfg.M, first_id=it * n)
        step = sim.step(it, batches)
        decision = step.decisions[0]
        parts, grads = loss_and_grads(model, TokenBatch(x, np.concatenate([b.origin for b in batches]),
                                                        np.arange(it * n, (it + 1) * n)),
                                      y, hp, decision, topo, cap, seed=cfg.seed)
        lr = lr_at(it + 1, hp)
        state = adam_step(params, grads, state, lr, hp.beta1, hp.beta2, hp.adam_eps)
        metrics.rows.append(StepMetrics(it + 1, parts.total, parts.balance, decision.drop_on, step.comm_bytes, lr,
                                        assignment_entropy(parts.assignment)))
        if not math.isfinite(parts.total):
            log.warning("non-finite loss at step %d", it + 1)

    final = evaluate(model, task, cfg, topo)
    metrics.final_eval_loss = final.task
    metrics.final_assignment = final.assignment
    return metrics, model
