import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedrop.errors import EmptyCandidateError, InvalidConfigError, InvalidInputError
from gatedrop.gating import (
    GatingNetwork,
    apply_jitter,
    balance_loss,
    gate_probs,
    hash_route,
    hash_route_many,
    select_expert,
    select_experts,
)
from gatedrop.numerics import RandomStream


def test_zero_jitter_is_identity():
    x = np.array([0.3, -1.2, 4.0], dtype=np.float32)
    np.testing.assert_array_equal(apply_jitter(x, 0.0, RandomStream(1, 1)), x)


def test_jitter_stays_in_band():
    out = apply_jitter(np.ones(1000), 0.01, RandomStream(1, 1))
    assert out.min() >= 0.99 and out.max() <= 1.01


def test_jitter_mean_is_unbiased():
    out = apply_jitter(np.ones(10_000), 0.01, RandomStream(4, 4))
    assert abs(out.mean() - 1.0) < 0.001


def test_jitter_consumes_one_draw_per_coordinate():
    rng = RandomStream(1, 1)
    apply_jitter(np.ones((3, 5)), 0.01, rng)
    assert rng.counter == 15
    rng = RandomStream(1, 1)
    apply_jitter(np.ones(4), 0.0, rng)
    assert rng.counter == 4


def test_negative_jitter_rejected():
    with pytest.raises(InvalidConfigError):
        apply_jitter(np.ones(2), -0.1, RandomStream(0, 0))


def test_zero_router_gives_uniform_probs():
    g = GatingNetwork(np.zeros((5, 3)))
    np.testing.assert_allclose(gate_probs(np.array([1.0, -2.0, 3.0]), g), [0.2] * 5)


def test_gate_probs_two_by_two():
    g = GatingNetwork(np.eye(2))
    expected = [math.e / (math.e + 1), 1 / (math.e + 1)]
    out = gate_probs(np.array([1.0, 0.0], dtype=np.float32), g)
    np.testing.assert_allclose(out, expected, atol=1e-6)
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_gate_probs_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        gate_probs(np.ones(3), GatingNetwork(np.ones((2, 2))))


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.01, 100))
def test_positive_scaling_keeps_argmax(xs, c):
    w = np.array([[1.0, 0.5, -0.2, 0.0], [0.1, -1.0, 0.3, 0.7], [-0.4, 0.2, 0.9, -0.6]])
    g = GatingNetwork(w)
    x = np.array(xs)
    logits = w @ x
    if len(np.unique(np.round(logits, 6))) < 3 or np.abs(logits).max() * c > 600:
        return
    p1, p2 = gate_probs(x, g), gate_probs(c * x, g)
    assert abs(p1.sum() - 1) < 1e-6 and abs(p2.sum() - 1) < 1e-6
    assert np.argmax(p1) == np.argmax(p2)


def test_select_expert_examples():
    d = select_expert(np.array([0.1, 0.7, 0.2]))
    assert (d.expert_index, d.gate_prob) == (1, pytest.approx(0.7))
    d = select_expert(np.array([0.6, 0.4]), [False, True])
    assert (d.expert_index, d.gate_prob) == (1, pytest.approx(0.4))
    assert select_expert(np.full(4, 0.25)).expert_index == 0


def test_select_expert_all_masked():
    with pytest.raises(EmptyCandidateError):
        select_expert(np.array([0.5, 0.5]), [False, False])


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8), st.data())
def test_single_expert_mask_returns_that_expert_unrenormalised(raw, data):
    probs = np.array(raw) / np.sum(raw)
    k = data.draw(st.integers(0, len(probs) - 1))
    mask = np.zeros(len(probs), dtype=bool)
    mask[k] = True
    d = select_expert(probs, mask)
    assert d.expert_index == k
    assert d.gate_prob == probs[k]
    assert d.gate_prob == d.full_probs[d.expert_index]


def test_batched_selection_matches_scalar():
    rng = RandomStream(0, 0)
    probs = rng.uniforms(40).reshape(10, 4)
    probs /= probs.sum(axis=1, keepdims=True)
    masks = rng.uniforms(40).reshape(10, 4) < 0.6
    masks[:, 2] = True
    idx, gp = select_experts(probs, masks)
    for r in range(10):
        d = select_expert(probs[r], masks[r])
        assert (idx[r], gp[r]) == (d.expert_index, d.gate_prob)


@pytest.mark.parametrize("n", [1, 2, 4, 8, 64])
def test_balance_loss_uniform_equals_alpha(n):
    u = np.full(n, 1.0 / n)
    assert balance_loss(u, u, 0.01) == pytest.approx(0.01)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_balance_loss_collapsed(n):
    onehot = np.eye(n)[0]
    assert balance_loss(onehot, onehot, 0.01) == pytest.approx(0.01 * n)


def test_balance_loss_zero_alpha_and_errors():
    assert balance_loss([0.5, 0.5], [0.2, 0.8], 0.0) == 0.0
    with pytest.raises(InvalidInputError):
        balance_loss([0.5, 0.5], [1.0], 0.01)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_balance_loss_minimised_at_uniform_on_simplex_grid(n):
    steps = 20
    best, best_q = None, None
    for counts in itertools.product(range(steps + 1), repeat=n - 1):
        if sum(counts) > steps:
            continue
        q = np.array(list(counts) + [steps - sum(counts)]) / steps
        val = balance_loss(q, q, 1.0)
        if best is None or val < best - 1e-12:
            best, best_q = val, q
    # the grid contains the uniform point only when n divides steps
    if steps % n == 0:
        np.testing.assert_allclose(best_q, np.full(n, 1.0 / n))
        assert best == pytest.approx(1.0)
    else:
        assert np.abs(best_q - 1.0 / n).max() <= 1.0 / steps


def test_hash_route_examples():
    assert hash_route(12345, 8) == hash_route(12345, 8)
    assert all(hash_route(t, 1) == 0 for t in range(50))
    ids = np.arange(100_000)
    counts = np.bincount(hash_route_many(ids, 8), minlength=8) / len(ids)
    assert np.all(np.abs(counts - 0.125) < 0.01)


def test_hash_route_many_matches_scalar():
    ids = [0, 1, 2, 17, 10**12]
    assert list(hash_route_many(ids, 5)) == [hash_route(t, 5) for t in ids]
