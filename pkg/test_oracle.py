"""Tests for dessim.oracle: exhaustive coresets and the Monte Carlo union estimate."""

import numpy as np
import pytest

from dessim.analysis import expected_unique_experts
from dessim.core import ConfigError, Coreset, GuardError, PoolConfig, Rng, RouterBlock
from dessim.des import VoteVector, des_vote_coreset, m_core
from dessim.gating import ExpertBank, unique_experts, vanilla_route
from dessim.metrics import reconstruction_loss, retained_vote_mass
from dessim.oracle import (
    exhaustive_additive_coreset,
    exhaustive_reconstruction_coreset,
    mc_unique_experts,
    reconstruction_losses,
)


class TestAdditiveOracle:
    def test_hand_votes(self):
        votes = VoteVector(np.array([0.64, 0.24, 0.24, 0.64]))
        assert exhaustive_additive_coreset(votes, 2).members == (0, 3)

    def test_full_budget(self):
        votes = VoteVector(np.array([0.1, 0.0, 0.3]))
        assert exhaustive_additive_coreset(votes, 3).members == (0, 1, 2)

    def test_ties_take_lowest_indices(self):
        votes = VoteVector(np.array([0.5, 0.5, 0.5, 0.5]))
        assert exhaustive_additive_coreset(votes, 2).members == (0, 1)

    def test_guard(self):
        with pytest.raises(GuardError):
            exhaustive_additive_coreset(VoteVector(np.ones(21)), 2)

    def test_budget_range(self):
        with pytest.raises(ConfigError):
            exhaustive_additive_coreset(VoteVector(np.ones(4)), 0)

    def test_matches_des_vote_mass(self):
        rng = Rng(31)
        for trial in range(500):
            M = int(rng.integers(2, 15))
            K = int(rng.integers(1, M + 1))
            N = int(rng.integers(1, 9))
            beta = float(rng.integers(1, M + 1)) / M
            cfg = PoolConfig(experts_total=M, top_k=K)
            block = RouterBlock(rng.normal((N, M)))
            coreset, votes = des_vote_coreset(block, cfg, beta)
            oracle = exhaustive_additive_coreset(votes, m_core(beta, M))
            assert retained_vote_mass(votes, coreset) == pytest.approx(
                retained_vote_mass(votes, oracle), abs=1e-12
            ), trial


class TestReconstructionOracle:
    cfg = PoolConfig(experts_total=6, top_k=2, hidden_dim=8)

    def test_not_worse_than_des_vote(self):
        block = RouterBlock(Rng(11).normal((2, 6)))
        bank = ExpertBank.build(self.cfg, 2, seed=11)
        coreset, loss = exhaustive_reconstruction_coreset(block, self.cfg, bank, 2)
        vote_coreset, _ = des_vote_coreset(block, self.cfg, 2 / 6)
        assert len(coreset) == 2
        assert loss <= reconstruction_loss(block, self.cfg, vote_coreset, bank).mean + 1e-12

    def test_budget_covering_union_is_lossless(self):
        block = RouterBlock(np.tile(Rng(12).normal(6), (3, 1)))
        bank = ExpertBank.build(self.cfg, 3, seed=12)
        union = unique_experts(vanilla_route(block, self.cfg))
        coreset, loss = exhaustive_reconstruction_coreset(block, self.cfg, bank, 3)
        assert loss <= 1e-12
        assert union.issubset(coreset)

    def test_vectorised_losses_match_metric(self):
        block = RouterBlock(Rng(13).normal((4, 6)))
        bank = ExpertBank.build(self.cfg, 4, seed=13)
        subsets = np.array([[0, 1, 2], [1, 3, 5], [0, 4, 5]])
        losses = reconstruction_losses(block, self.cfg, bank, subsets)
        for row, loss in zip(subsets, losses):
            expected = reconstruction_loss(block, self.cfg, Coreset(tuple(int(i) for i in row)), bank).mean
            assert loss == pytest.approx(expected, abs=1e-12)

    def test_expert_guard(self):
        cfg = PoolConfig(experts_total=13, top_k=2, hidden_dim=4)
        bank = ExpertBank.build(cfg, 2, seed=0)
        with pytest.raises(GuardError):
            exhaustive_reconstruction_coreset(RouterBlock(Rng(0).normal((2, 13))), cfg, bank, 2)

    def test_token_guard(self):
        bank = ExpertBank.build(self.cfg, 9, seed=0)
        with pytest.raises(GuardError):
            exhaustive_reconstruction_coreset(RouterBlock(Rng(0).normal((9, 6))), self.cfg, bank, 2)


class TestMonteCarlo:
    @pytest.mark.parametrize("method", ["hypergeometric", "subsets"])
    def test_single_token_is_exact(self, method):
        mean, stderr = mc_unique_experts(64, 8, 1, 2_000, seed=0, method=method)
        assert mean == 8.0
        assert stderr == 0.0

    def test_wide_block(self):
        mean, stderr = mc_unique_experts(256, 8, 32, 100_000, seed=5)
        closed = expected_unique_experts(256, 8, 32)
        assert abs(mean - closed) <= 0.5
        assert abs(mean - closed) <= 3 * stderr + 1e-9

    def test_subset_sampling_agrees(self):
        mean, stderr = mc_unique_experts(32, 4, 8, 20_000, seed=6, method="subsets")
        assert abs(mean - expected_unique_experts(32, 4, 8)) <= 4 * stderr + 1e-9

    def test_worker_count_does_not_change_result(self):
        serial = mc_unique_experts(128, 4, 16, 35_000, seed=9, workers=1)
        parallel = mc_unique_experts(128, 4, 16, 35_000, seed=9, workers=4)
        assert serial == parallel

    @pytest.mark.parametrize("kwargs", [{"trials": 0}, {"method": "bogus"}, {"N": 0}])
    def test_invalid(self, kwargs):
        args = {"M": 16, "K": 2, "N": 4, "trials": 100, "seed": 0} | kwargs
        with pytest.raises(ConfigError):
            mc_unique_experts(**args)


@pytest.mark.slow
@pytest.mark.parametrize("M", [64, 128, 256])
@pytest.mark.parametrize("K", [1, 2, 4, 8])
@pytest.mark.parametrize("N", [1, 4, 16, 64])
def test_closed_form_within_three_stderr(M, K, N):
    mean, stderr = mc_unique_experts(M, K, N, 100_000, seed=M * 1000 + K * 100 + N)
    closed = expected_unique_experts(M, K, N)
    assert abs(mean - closed) <= 3 * stderr + 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("M", [64, 256])
def test_union_curve_monotone_and_saturating(M):
    curve = []
    for N in (1, 2, 4, 8, 16, 32, 64):
        mean, stderr = mc_unique_experts(M, 8, N, 100_000, seed=M + N)
        assert abs(mean - expected_unique_experts(M, 8, N)) <= 3 * stderr + 1e-9
        curve.append(mean)
    assert curve == sorted(curve)
    assert curve[0] == 8.0
    assert curve[-1] < M
