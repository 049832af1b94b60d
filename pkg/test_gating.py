"""Tests for dessim.gating: activation, top-K routing, expert bank and MoE forward."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dessim.core import GateActivation, PoolConfig, Rng, RouterBlock, RoutingAssignment
from dessim.gating import (
    ExpertBank,
    activate,
    moe_forward,
    topk_route,
    unique_experts,
    vanilla_route,
)

HAND_ROW = [3.0, 2.0, 1.0, 0.0]
HAND_SOFTMAX = [0.6439, 0.2369, 0.0871, 0.0321]


def random_block(seed: int, n: int, m: int) -> RouterBlock:
    return RouterBlock(Rng(seed).normal((n, m)))


class TestActivate:
    def test_uniform_logits(self):
        probs = activate(RouterBlock([[0.0] * 4]), PoolConfig(experts_total=4, top_k=2)).probs
        assert probs[0].tolist() == pytest.approx([0.25] * 4)

    def test_hand_softmax(self):
        probs = activate(RouterBlock([HAND_ROW]), PoolConfig(experts_total=4, top_k=2)).probs
        assert probs[0].tolist() == pytest.approx(HAND_SOFTMAX, abs=1e-4)

    def test_single_expert(self):
        probs = activate(RouterBlock([[0.0]]), PoolConfig(experts_total=1, top_k=1)).probs
        assert probs.tolist() == [[1.0]]

    def test_large_logits_are_stable(self):
        probs = activate(RouterBlock([[1000.0, 999.0]]), PoolConfig(experts_total=2, top_k=1)).probs
        assert np.all(np.isfinite(probs))
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_sigmoid_rows_in_unit_interval(self):
        cfg = PoolConfig(experts_total=8, top_k=2, gate_activation=GateActivation.SIGMOID)
        probs = activate(random_block(0, 4, 8), cfg).probs
        assert np.all((probs > 0) & (probs < 1))

    def test_softmax_rows_sum_to_one(self):
        probs = activate(random_block(1, 16, 64), PoolConfig(experts_total=64, top_k=8)).probs
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)


class TestTopkRoute:
    def test_hand_example(self):
        gates = activate(RouterBlock([HAND_ROW]), PoolConfig(experts_total=4, top_k=2))
        assign = topk_route(gates, 2)
        assert assign.selected == ((0, 1),)
        assert list(assign.gates[0]) == pytest.approx([0.7310, 0.2690], abs=1e-4)

    def test_full_selection_keeps_activation(self):
        cfg = PoolConfig(experts_total=4, top_k=4)
        gates = activate(RouterBlock([HAND_ROW]), cfg)
        assign = topk_route(gates, 4)
        assert assign.selected == ((0, 1, 2, 3),)
        assert list(assign.gates[0]) == pytest.approx(gates.probs[0].tolist(), abs=1e-12)

    def test_ties_go_to_lowest_index(self):
        gates = activate(RouterBlock([[0.0] * 4]), PoolConfig(experts_total=4, top_k=2))
        assert topk_route(gates, 2).selected == ((0, 1),)

    def test_sigmoid_gates_renormalised(self):
        cfg = PoolConfig(experts_total=16, top_k=4, gate_activation=GateActivation.SIGMOID)
        for gates in vanilla_route(random_block(2, 8, 16), cfg).gates:
            assert sum(gates) == pytest.approx(1.0, abs=1e-9)

    def test_shift_invariance(self):
        cfg = PoolConfig(experts_total=32, top_k=4)
        block = random_block(3, 8, 32)
        shifted = RouterBlock(block.logits + 7.5)
        a, b = vanilla_route(block, cfg), vanilla_route(shifted, cfg)
        assert a.selected == b.selected
        for ga, gb in zip(a.gates, b.gates):
            assert list(ga) == pytest.approx(list(gb), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8), m=st.integers(2, 48), data=st.data())
def test_topk_route_is_permutation_equivariant(seed, n, m, data):
    k = data.draw(st.integers(1, m))
    perm = np.array(data.draw(st.permutations(range(m))))
    cfg = PoolConfig(experts_total=m, top_k=k)
    block = random_block(seed, n, m)
    base = vanilla_route(block, cfg)
    permuted = vanilla_route(RouterBlock(block.logits[:, perm]), cfg)
    for sel, sel_p, g, g_p in zip(base.selected, permuted.selected, base.gates, permuted.gates):
        assert tuple(int(perm[j]) for j in sel_p) == sel
        assert list(g_p) == pytest.approx(list(g), abs=1e-12)


class TestMoeForward:
    def test_single_expert_with_unit_gate(self):
        cfg = PoolConfig(experts_total=4, top_k=1, hidden_dim=8)
        bank = ExpertBank.build(cfg, n_tokens=1, seed=5)
        out = moe_forward(RoutingAssignment.from_rows([((2,), (1.0,))]), bank)
        assert np.array_equal(out[0], bank.weights[2] @ bank.token_inputs[0])

    def test_identical_experts_half_gates(self):
        cfg = PoolConfig(experts_total=2, top_k=2, hidden_dim=6)
        built = ExpertBank.build(cfg, n_tokens=1, seed=9)
        weights = np.stack([built.weights[0], built.weights[0]])
        bank = ExpertBank(weights=weights, token_inputs=built.token_inputs)
        out = moe_forward(RoutingAssignment.from_rows([((0, 1), (0.5, 0.5))]), bank)
        assert np.allclose(out[0], weights[0] @ built.token_inputs[0], atol=1e-12)

    def test_matches_double_loop(self):
        cfg = PoolConfig(experts_total=16, top_k=8, hidden_dim=12)
        block = random_block(7, 6, 16)
        bank = ExpertBank.build(cfg, n_tokens=6, seed=7)
        assign = vanilla_route(block, cfg)
        expected = np.zeros((6, 12))
        for n in range(6):
            for i, g in zip(assign.selected[n], assign.gates[n]):
                for r in range(12):
                    expected[n, r] += g * sum(bank.weights[i, r, c] * bank.token_inputs[n, c] for c in range(12))
        assert np.allclose(moe_forward(assign, bank), expected, atol=1e-12)

    def test_expert_outputs_tensor(self):
        cfg = PoolConfig(experts_total=5, top_k=2, hidden_dim=4)
        bank = ExpertBank.build(cfg, n_tokens=3, seed=1)
        outputs = bank.expert_outputs()
        assert outputs.shape == (3, 5, 4)
        assert np.allclose(outputs[2, 4], bank.expert_output(4, bank.token_inputs[2]), atol=1e-12)

    def test_bank_is_seed_determined(self):
        cfg = PoolConfig(experts_total=4, top_k=2, hidden_dim=4)
        a, b = ExpertBank.build(cfg, 3, 11), ExpertBank.build(cfg, 3, 11)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.token_inputs, b.token_inputs)
        # the experts do not depend on how many tokens were drawn
        assert np.array_equal(ExpertBank.build(cfg, 7, 11).weights, a.weights)


class TestUniqueExperts:
    def test_single_token(self):
        cfg = PoolConfig(experts_total=16, top_k=4)
        assign = vanilla_route(random_block(0, 1, 16), cfg)
        assert unique_experts(assign).members == tuple(sorted(assign.selected[0]))

    def test_identical_tokens(self):
        cfg = PoolConfig(experts_total=16, top_k=4)
        row = Rng(4).normal(16)
        assert len(unique_experts(vanilla_route(RouterBlock(np.tile(row, (10, 1))), cfg))) == 4

    def test_matches_set_union(self):
        cfg = PoolConfig(experts_total=256, top_k=8)
        assign = vanilla_route(RouterBlock(Rng(3).random((32, 256))), cfg)
        union = set()
        for sel in assign.selected:
            union |= set(sel)
        coreset = unique_experts(assign)
        assert set(coreset.members) == union
        assert 8 <= len(coreset) <= min(256, 32 * 8)
