"""Tests for dessim.analysis: latency model, coreset bound, unique-expert growth, memory."""

import numpy as np
import pytest

from dessim.analysis import (
    LatencyParams,
    TrafficReport,
    coreset_latency_bound,
    expected_unique_experts,
    latency_reduction,
    memory_footprint,
    moe_latency,
    operational_intensity,
)
from dessim.core import ConfigError, Coreset, PoolConfig, Rng, RouterBlock, RoutingAssignment
from dessim.des import constrained_route, des_seq_coreset, des_vote_coreset

BYTES_PER_EXPERT = 0.98e9 / 84


def wrapped_assignment(n_tokens: int, k: int, union: int) -> RoutingAssignment:
    """Token n selects k consecutive experts starting at n*k, modulo ``union``."""
    rows = []
    for n in range(n_tokens):
        sel = tuple((n * k + j) % union for j in range(k))
        rows.append((sel, (1.0 / k,) * k))
    return RoutingAssignment.from_rows(rows)


def random_assignment(rng: Rng, M: int, K: int, N: int) -> RoutingAssignment:
    rows = []
    for _ in range(N):
        k = int(rng.integers(1, K + 1))
        sel = tuple(int(i) for i in np.argsort(rng.random(M))[:k])
        rows.append((sel, (1.0 / k,) * k))
    return RoutingAssignment.from_rows(rows)


class TestMoeLatency:
    def test_vanilla_wide_block(self):
        assign = wrapped_assignment(32, 8, 84)
        report = moe_latency(assign, LatencyParams(a=0.1, b=1.0), 256, BYTES_PER_EXPERT)
        assert report.unique_experts == 84
        assert report.latency == pytest.approx(109.6, abs=1e-9)
        assert report.memory_bytes == pytest.approx(0.98e9, rel=1e-12)
        assert report.routed_tokens == 256
        assert report.per_expert_counts.sum() == 256

    def test_memory_bound_limit(self):
        assign = wrapped_assignment(10, 4, 30)
        report = moe_latency(assign, LatencyParams(a=0.0, b=2.5), 30)
        assert report.latency == 2.5 * report.unique_experts

    def test_compute_bound_limit(self):
        assign = wrapped_assignment(10, 4, 30)
        report = moe_latency(assign, LatencyParams(a=0.5, b=0.0), 30)
        assert report.latency == 0.5 * 10 * 4

    def test_infers_pool_size(self):
        report = moe_latency(wrapped_assignment(2, 2, 5), LatencyParams())
        assert len(report.per_expert_counts) == 4

    def test_negative_costs_rejected(self):
        with pytest.raises(ValueError):
            LatencyParams(a=-1.0)


def test_latency_forms_agree_on_random_assignments():
    rng = Rng(17)
    params = LatencyParams(a=0.1, b=1.0)
    for _ in range(500):
        M = int(rng.integers(1, 65))
        K = int(rng.integers(1, M + 1))
        N = int(rng.integers(1, 33))
        report = moe_latency(random_assignment(rng, M, K, N), params, M)
        assert report.unique_experts <= min(M, report.routed_tokens)


@pytest.mark.slow
def test_latency_forms_and_bound_ten_thousand():
    rng = Rng(4)
    for trial in range(10_000):
        M = int(rng.integers(2, 65))
        K = int(rng.integers(1, min(M, 8) + 1))
        N = int(rng.integers(1, 17))
        cfg = PoolConfig(experts_total=M, top_k=K)
        block = RouterBlock(rng.normal((N, M)))
        params = LatencyParams(a=float(rng.random()), b=float(rng.random()))
        coreset = des_seq_coreset(block, cfg, int(rng.integers(1, K + 1)))
        report = moe_latency(constrained_route(block, cfg, coreset), params, M)
        assert report.latency <= coreset_latency_bound(coreset, N, K, params), trial


class TestCoresetBound:
    def test_table_value(self):
        bound = coreset_latency_bound(Coreset(tuple(range(38))), 32, 8, LatencyParams(a=0.1, b=1.0))
        assert bound == pytest.approx(63.6, abs=1e-9)

    def test_full_pool_is_vanilla_worst_case(self):
        params = LatencyParams(a=0.2, b=3.0)
        assert coreset_latency_bound(Coreset(tuple(range(64))), 8, 8, params) == pytest.approx(3.0 * 64 + 0.2 * 64)

    def test_dominates_constrained_routing(self):
        cfg = PoolConfig(experts_total=64, top_k=8)
        params = LatencyParams(a=0.1, b=1.0)
        for seed in range(200):
            block = RouterBlock(Rng(seed).normal((16, 64)))
            coreset, _ = des_vote_coreset(block, cfg, 0.2)
            report = moe_latency(constrained_route(block, cfg, coreset), params, 64)
            assert report.latency <= coreset_latency_bound(coreset, 16, 8, params)


class TestExpectedUniqueExperts:
    def test_single_token(self):
        assert expected_unique_experts(256, 8, 1) == pytest.approx(8.0, abs=1e-12)

    def test_wide_block(self):
        assert expected_unique_experts(256, 8, 32) == pytest.approx(163.3, abs=0.1)

    def test_reduced_top_k_block(self):
        # closed form at K=4 gives 101.35
        assert expected_unique_experts(256, 4, 32) == pytest.approx(101.35, abs=0.05)

    def test_saturates(self):
        assert expected_unique_experts(64, 8, 10_000) == pytest.approx(64.0, abs=1e-9)

    def test_monotone_and_bounded(self):
        for M, K in [(64, 8), (256, 8)]:
            values = [expected_unique_experts(M, K, N) for N in range(1, 129)]
            assert values == sorted(values)
            assert values[-1] <= M
        by_k = [expected_unique_experts(64, k, 16) for k in range(1, 65)]
        assert by_k == sorted(by_k)

    @pytest.mark.parametrize("M, K, N", [(8, 9, 1), (8, 0, 1), (8, 2, 0)])
    def test_invalid(self, M, K, N):
        with pytest.raises(ConfigError):
            expected_unique_experts(M, K, N)


class TestMemory:
    @pytest.mark.parametrize(
        "unique, expected_gb",
        [(84, 0.98), (56, 0.66), (65, 0.76), (66, 0.77), (45, 0.53), (38, 0.45), (34, 0.40), (25, 0.29)],
    )
    def test_calibrated_memory(self, unique, expected_gb):
        assert memory_footprint(unique, BYTES_PER_EXPERT) / 1e9 == pytest.approx(expected_gb, rel=0.05)

    def test_zero(self):
        assert memory_footprint(0, BYTES_PER_EXPERT) == 0


def test_latency_reduction():
    reference = moe_latency(wrapped_assignment(32, 8, 84), LatencyParams(), 256)
    candidate = moe_latency(wrapped_assignment(32, 8, 38), LatencyParams(), 256)
    assert latency_reduction(reference, candidate) == pytest.approx(1 - 63.6 / 109.6)
    assert latency_reduction(reference, reference) == 0.0


def test_operational_intensity():
    report = TrafficReport(unique_experts=2, latency=0.0, memory_bytes=0.0, per_expert_counts=np.array([3, 1, 0]))
    assert operational_intensity(report, flops_per_token_expert=10.0, bytes_per_expert=5.0) == 4.0
    empty = TrafficReport(unique_experts=0, latency=0.0, memory_bytes=0.0, per_expert_counts=np.zeros(3, dtype=int))
    assert operational_intensity(empty, 10.0, 5.0) == 0.0
