"""
Dynamic Expert Sharing: pick one coreset of experts for a whole decoding block,
then route every token inside it.

Two coreset strategies are provided. ``seq`` takes the union of each token's
local top-k. ``vote`` sums each token's top-K-masked gate weights into a vote
vector and keeps the ``floor(beta * M)`` best-voted experts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from mcp.server.fastmcp.utilities.logging import get_logger
from pydantic import BaseModel, ConfigDict

from dessim.core import (
    ConfigError,
    Coreset,
    GateActivation,
    PoolConfig,
    RouterBlock,
    RoutingAssignment,
)
from dessim.gating import activate, select_and_normalize, topk_indices

logger = get_logger(__name__)

# absorbs binary rounding of beta * M before flooring (0.3 * 10 -> 2.9999999999999996)
_FLOOR_EPS = 1e-9


class Strategy(str, Enum):
    SEQ = "seq"
    VOTE = "vote"


class VoteSource(str, Enum):
    WEIGHTS = "weights"
    LOGITS = "logits"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class VoteVector:
    """Per-expert summed votes of a block."""

    votes: np.ndarray

    def __len__(self) -> int:
        return len(self.votes)


class DesParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    strategy: Strategy
    seq_k: int | None = None
    vote_beta: float | None = None
    vote_source: VoteSource = VoteSource.WEIGHTS
    route_k: int | None = None


def m_core(beta: float, experts_total: int) -> int:
    """Coreset size for budget factor beta: floor(beta * M)."""
    return int(math.floor(beta * experts_total + _FLOOR_EPS))


def check_params(params: DesParams, cfg: PoolConfig) -> DesParams:
    if params.strategy is Strategy.SEQ:
        if params.seq_k is None or not 1 <= params.seq_k <= cfg.top_k:
            raise ConfigError("1 <= k <= K", f"k={params.seq_k}, K={cfg.top_k}")
    else:
        beta = params.vote_beta
        if beta is None or not 0 < beta <= 1:
            raise ConfigError("0 < beta <= 1", f"beta={beta}")
        if m_core(beta, cfg.experts_total) < 1:
            raise ConfigError("floor(beta * M) >= 1", f"beta={beta}, M={cfg.experts_total}")
    if params.route_k is not None and not 1 <= params.route_k <= cfg.top_k:
        raise ConfigError("1 <= route_k <= K", f"route_k={params.route_k}")
    return params


def des_seq_coreset(block: RouterBlock, cfg: PoolConfig, k: int) -> Coreset:
    if not 1 <= k <= cfg.top_k:
        raise ConfigError("1 <= k <= K", f"k={k}, K={cfg.top_k}")
    probs = activate(block, cfg).probs
    members: set[int] = set()
    for row in probs:
        members.update(int(i) for i in topk_indices(row, k))
    return Coreset.of(members)


def masked_votes(block: RouterBlock, cfg: PoolConfig, source: VoteSource = VoteSource.WEIGHTS) -> np.ndarray:
    """N x M matrix keeping only each token's top-K entries (hard zeros elsewhere)."""
    probs = activate(block, cfg).probs
    masked = np.zeros_like(probs)
    rows = np.arange(probs.shape[0])[:, None]
    top = np.argsort(-probs, axis=1, kind="stable")[:, : cfg.top_k]
    if source is VoteSource.WEIGHTS:
        masked[rows, top] = probs[rows, top]
    elif source is VoteSource.LOGITS:
        masked[rows, top] = block.logits[rows, top]
    else:
        masked[rows, top] = 1.0
    return masked


def rank_votes(votes: np.ndarray, size: int) -> Coreset:
    return Coreset.of(topk_indices(votes, size))


def des_vote_coreset(
    block: RouterBlock,
    cfg: PoolConfig,
    beta: float,
    vote_source: VoteSource = VoteSource.WEIGHTS,
) -> tuple[Coreset, VoteVector]:
    size = m_core(beta, cfg.experts_total)
    if size < 1 or beta > 1:
        raise ConfigError("1 <= floor(beta * M), beta <= 1", f"beta={beta}, M={cfg.experts_total}")
    votes = masked_votes(block, cfg, vote_source).sum(axis=0)
    return rank_votes(votes, size), VoteVector(votes)


def constrained_route(
    block: RouterBlock,
    cfg: PoolConfig,
    coreset: Coreset,
    route_k: int | None = None,
) -> RoutingAssignment:
    """Each token takes its top min(K, |coreset|) experts from the coreset only."""
    if len(coreset) < 1:
        raise ConfigError("|coreset| >= 1")
    coreset.check(cfg.experts_total)
    k = cfg.top_k if route_k is None else route_k
    probs = activate(block, cfg).probs
    allowed = coreset.mask(cfg.experts_total)
    return RoutingAssignment.from_rows([select_and_normalize(row, k, allowed) for row in probs])


def select_coreset(block: RouterBlock, cfg: PoolConfig, params: DesParams) -> tuple[Coreset, VoteVector | None]:
    check_params(params, cfg)
    if params.strategy is Strategy.SEQ:
        return des_seq_coreset(block, cfg, params.seq_k), None
    return des_vote_coreset(block, cfg, params.vote_beta, params.vote_source)


def des_run(block: RouterBlock, cfg: PoolConfig, params: DesParams) -> tuple[Coreset, RoutingAssignment]:
    coreset, _ = select_coreset(block, cfg, params)
    assign = constrained_route(block, cfg, coreset, params.route_k)
    logger.debug("des %s: |C|=%d over N=%d", params.strategy.value, len(coreset), block.block_size)
    return coreset, assign


def fused_vote_pipeline(block: RouterBlock, cfg: PoolConfig, beta: float) -> tuple[Coreset, VoteVector]:
    """Coreset selection as one traversal plus one ranking pass.

    Each token's row is activated, top-K filtered and added into the vote
    accumulator in place, without materialising the N x M gate or mask matrices.
    Produces the same coreset as ``des_vote_coreset`` and votes within 1e-9.
    """
    block.check(cfg)
    size = m_core(beta, cfg.experts_total)
    if size < 1 or beta > 1:
        raise ConfigError("1 <= floor(beta * M), beta <= 1", f"beta={beta}, M={cfg.experts_total}")

    K = cfg.top_k
    votes = np.zeros(cfg.experts_total)
    for row in block.logits:
        if cfg.gate_activation is GateActivation.SOFTMAX:
            e = np.exp(row - row.max())
            p = e / e.sum()
        else:
            p = 1.0 / (1.0 + np.exp(-row))
        top = np.argsort(-p, kind="stable")[:K]
        votes[top] += p[top]

    keep = np.zeros(cfg.experts_total, dtype=bool)
    keep[np.argsort(-votes, kind="stable")[:size]] = True
    return Coreset(tuple(int(i) for i in np.flatnonzero(keep))), VoteVector(votes)
