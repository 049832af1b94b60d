"""
Quality metrics of a sharing strategy against vanilla routing.

Reconstruction losses are relative squared residuals on the synthetic expert
bank: ||y_vanilla - y||^2 / ||y_vanilla||^2 per token, averaged over tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable

import numpy as np

from dessim.core import ConfigError, Coreset, PoolConfig, RouterBlock, RoutingAssignment, ShapeError
from dessim.des import VoteVector, constrained_route
from dessim.gating import ExpertBank, moe_forward, token_forward, vanilla_route

# tokens whose vanilla output norm^2 is at or below this have no defined loss
VANISHING_NORM2 = 1e-30


@dataclass(frozen=True)
class HitRateVector:
    """Per-expert selections divided by (tokens * K)."""

    rates: np.ndarray

    def __len__(self) -> int:
        return len(self.rates)


@dataclass(frozen=True)
class LossReport:
    mean: float
    per_token: tuple[float | None, ...]
    undefined: int


def topk_recall(vanilla: RoutingAssignment, coreset: Coreset, K: int | None = None) -> float:
    """Mean fraction of each token's vanilla top-K that lies in the coreset."""
    members = set(coreset.members)
    total = 0.0
    for sel in vanilla.selected:
        k = K or len(sel)
        total += len(members.intersection(sel)) / k
    return total / vanilla.n_tokens


def selection_recall(vanilla: RoutingAssignment, other: RoutingAssignment, K: int | None = None) -> float:
    if vanilla.n_tokens != other.n_tokens:
        raise ShapeError("assignments cover different token counts")
    total = 0.0
    for van, sel in zip(vanilla.selected, other.selected):
        total += len(set(van).intersection(sel)) / (K or len(van))
    return total / vanilla.n_tokens


def retained_vote_mass(votes: VoteVector, coreset: Coreset) -> float:
    """Sum of the coreset's votes, exactly rounded so equal sets give equal sums."""
    return math.fsum(float(votes.votes[i]) for i in coreset.members)


def _relative_residuals(reference: np.ndarray, outputs: np.ndarray) -> LossReport:
    ref_norm2 = np.einsum("nd,nd->n", reference, reference)
    diff = reference - outputs
    res_norm2 = np.einsum("nd,nd->n", diff, diff)
    per_token: list[float | None] = []
    for r, d in zip(ref_norm2, res_norm2):
        per_token.append(None if r <= VANISHING_NORM2 else float(d / r))
    defined = [v for v in per_token if v is not None]
    mean = float(np.mean(defined)) if defined else float("nan")
    return LossReport(mean=mean, per_token=tuple(per_token), undefined=len(per_token) - len(defined))


def assignment_loss(vanilla: RoutingAssignment, other: RoutingAssignment, bank: ExpertBank) -> LossReport:
    return _relative_residuals(moe_forward(vanilla, bank), moe_forward(other, bank))


def reconstruction_loss(
    block: RouterBlock,
    cfg: PoolConfig,
    coreset: Coreset,
    bank: ExpertBank,
    route_k: int | None = None,
) -> LossReport:
    bank.check(cfg)
    vanilla = vanilla_route(block, cfg)
    return assignment_loss(vanilla, constrained_route(block, cfg, coreset, route_k), bank)


def expert_importance_map(block: RouterBlock, cfg: PoolConfig, bank: ExpertBank) -> np.ndarray:
    """Entry (n, i): token n's relative error when expert i leaves its vanilla selection."""
    bank.check(cfg)
    vanilla = vanilla_route(block, cfg)
    reference = moe_forward(vanilla, bank)
    out = np.zeros((block.block_size, cfg.experts_total))
    for n, (sel, gates) in enumerate(zip(vanilla.selected, vanilla.gates)):
        ref = reference[n]
        ref_norm2 = float(ref @ ref)
        if ref_norm2 <= VANISHING_NORM2:
            continue
        for drop in sel:
            kept = [(i, g) for i, g in zip(sel, gates) if i != drop]
            total = sum(g for _, g in kept)
            if kept and total > 0:
                y = token_forward([i for i, _ in kept], [g / total for _, g in kept], bank, bank.token_inputs[n])
            else:
                y = np.zeros(bank.hidden_dim)
            diff = ref - y
            out[n, drop] = float(diff @ diff) / ref_norm2
    return out


def hit_rate_vector(assignments: Iterable[RoutingAssignment], experts_total: int, K: int) -> HitRateVector:
    counts = np.zeros(experts_total, dtype=np.int64)
    tokens = 0
    for assign in assignments:
        counts += assign.counts(experts_total)
        tokens += assign.n_tokens
    if tokens == 0:
        return HitRateVector(np.zeros(experts_total))
    return HitRateVector(counts / (tokens * K))


def hit_rate_cosine(a: HitRateVector, b: HitRateVector) -> float:
    if len(a) != len(b):
        raise ShapeError("hit-rate vectors differ in length")
    na, nb = np.linalg.norm(a.rates), np.linalg.norm(b.rates)
    if na == 0 and nb == 0:
        raise ConfigError("at least one hit-rate vector nonzero")
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a.rates @ b.rates / (na * nb), -1.0, 1.0))


def activation_frequency_curve(hits: HitRateVector) -> np.ndarray:
    return np.sort(hits.rates)[::-1]


def pairwise_overlap(assign: RoutingAssignment, K: int) -> float:
    """Mean |S_a & S_b| / K over token pairs; 1.0 for a single token."""
    if assign.n_tokens < 2:
        return 1.0
    sets = [set(sel) for sel in assign.selected]
    pairs = list(combinations(range(len(sets)), 2))
    return sum(len(sets[x] & sets[y]) for x, y in pairs) / (K * len(pairs))
