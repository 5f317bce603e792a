"""Independent reference implementations used as test oracles.

Plain Python loops and float64 throughout; nothing here shares code with the
vectorised paths under test except the random stream definition.
"""

import math

from gatedrop.cluster import JITTER_STREAM
from gatedrop.numerics import RandomStream, uniform


def _matvec(w, x):
    return [sum(float(w[i][j]) * float(x[j]) for j in range(len(x))) for i in range(len(w))]


def brute_force_moe(layer, tokens, cf_capacity, *, seed=0, jitter_eps=0.0, token_ids=None):
    """Single-process top-1 MoE over ``tokens`` (global order) with FCFS capacity."""
    token_ids = list(range(len(tokens))) if token_ids is None else list(token_ids)
    n_exp = len(layer.experts)
    used = [0] * n_exp
    out = []
    order = sorted(range(len(tokens)), key=lambda i: token_ids[i])
    result = [None] * len(tokens)
    for i in order:
        x = [float(v) for v in tokens[i]]
        d = len(x)
        if jitter_eps:
            rng = RandomStream(seed, JITTER_STREAM, counter=token_ids[i] * d)
            z = [x[j] * (1.0 - jitter_eps + 2.0 * jitter_eps * uniform(rng)) for j in range(d)]
        else:
            z = x
        logits = _matvec(layer.gate.weight, z)
        top = max(logits)
        ex = [math.exp(v - top) for v in logits]
        s = sum(ex)
        probs = [v / s for v in ex]
        best = 0
        for k in range(1, n_exp):
            if probs[k] > probs[best]:
                best = k
        if used[best] >= cf_capacity:
            result[i] = x
            continue
        used[best] += 1
        e = layer.experts[best]
        hidden = [max(0.0, v) for v in _matvec(e.w1, x)]
        o = _matvec(e.w2, hidden)
        result[i] = [probs[best] * v for v in o]
    out = result
    return out
