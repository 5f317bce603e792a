import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gatedrop.cluster import ClusterSimulator, Mode, gaussian_tokens, place_experts, random_layer, split_batch
from gatedrop.costmodel import (
    CostParams,
    alltoall_bytes,
    expected_step_comm_bytes,
    no_alltoall_throughput,
    relative_improvement,
    throughput_estimate,
)
from gatedrop.errors import InvalidConfigError


def test_one_gigabyte_example():
    assert alltoall_bytes(128, 1024, 4096) == 2 ** 30


def test_alltoall_trivial_cases():
    assert alltoall_bytes(1, 1, 1) == 2
    assert alltoall_bytes(0, 5, 5) == alltoall_bytes(5, 0, 5) == alltoall_bytes(5, 5, 0) == 0


def test_expected_bytes_edges():
    assert expected_step_comm_bytes(1.0, 8, 16, 32, 2, 2, 4) == 0
    full = 2 * alltoall_bytes(8, 16, 32) * 2 * 2
    assert expected_step_comm_bytes(0.0, 8, 16, 32, 2, 2, 10**6) == pytest.approx(full, rel=1e-5)
    base = expected_step_comm_bytes(0.0, 8, 16, 32, 1, 2, 4)
    assert expected_step_comm_bytes(0.3, 8, 16, 32, 1, 2, 4) == pytest.approx(0.7 * base)
    assert expected_step_comm_bytes(0.0, 8, 16, 32, 1, 1, 1) == 0


@given(st.floats(0, 1), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64))
def test_expected_bytes_linear(p, B, L, d):
    unit = expected_step_comm_bytes(0.0, 1, 1, 1, 1, 2, 4)
    assert expected_step_comm_bytes(p, B, L, d, 1, 2, 4) == pytest.approx((1 - p) * B * L * d * unit)


def test_invalid_rate():
    with pytest.raises(InvalidConfigError):
        expected_step_comm_bytes(1.2, 1, 1, 1, 1, 1, 2)
    with pytest.raises(InvalidConfigError):
        throughput_estimate(CostParams(), -0.1)


def test_invalid_params():
    with pytest.raises(InvalidConfigError):
        CostParams(link_bandwidth=0)
    with pytest.raises(InvalidConfigError):
        CostParams(per_message_latency=-1)


def test_report_consistency():
    params = CostParams(M=8)
    r = throughput_estimate(params, 0.3, Mode.GATE_DROP)
    assert r.tokens_per_second == pytest.approx(params.step_tokens / (r.comm_seconds_per_step + r.compute_seconds_per_step))


def test_p_one_is_no_alltoall():
    params = CostParams(M=16)
    r = throughput_estimate(params, 1.0, Mode.GATE_DROP)
    assert r.comm_seconds_per_step == 0
    assert r.tokens_per_second == pytest.approx(no_alltoall_throughput(params))
    assert throughput_estimate(params, 1.0, Mode.GATE_EXPERT_DROP).tokens_per_second > no_alltoall_throughput(params)


def test_table_two_ordering():
    params = CostParams()
    base = throughput_estimate(params, 0.0, Mode.BASELINE).tokens_per_second
    gd = throughput_estimate(params, 0.3, Mode.GATE_DROP).tokens_per_second
    ged = throughput_estimate(params, 0.2, Mode.GATE_EXPERT_DROP).tokens_per_second
    hashed = throughput_estimate(params, 0.0, Mode.HASH).tokens_per_second
    assert ged > gd > base
    assert gd > hashed > base


def test_relative_improvement_grows_with_workers():
    vals = [relative_improvement(CostParams(M=m)) for m in (8, 16, 32, 64, 128)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("mode", [Mode.GATE_DROP, Mode.GATE_EXPERT_DROP])
def test_monotone_in_p(mode):
    params = CostParams(M=8)
    tps = [throughput_estimate(params, p, mode).tokens_per_second for p in np.linspace(0, 1, 21)]
    assert all(b >= a for a, b in zip(tps, tps[1:]))


def test_non_drop_modes_ignore_p():
    params = CostParams()
    assert throughput_estimate(params, 0.7, Mode.BASELINE) == throughput_estimate(params, 0.0, Mode.BASELINE)


@pytest.mark.parametrize("p", [0.0, 0.5])
def test_ledger_agrees_with_model_small_run(p):
    B, L, d, M = 2, 16, 8, 4
    sim = ClusterSimulator([random_layer(4, d, 16, seed=0)], place_experts(4, M), Mode.GATE_DROP, p,
                           seed=4, cf=4.0, passes_per_step=2)
    steps = 600
    for it in range(steps):
        sim.step(it, split_batch(gaussian_tokens(B * L, d, 4, it), M, first_id=it * B * L))
    measured = sim.ledger.bytes_per_iteration(steps).mean()
    assert measured == pytest.approx(expected_step_comm_bytes(p, B, L, d, 1, 2, M), rel=0.08)
