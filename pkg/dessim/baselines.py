"""
Token-centric expert-skipping baselines adapted to block decoding:
reduced top-K, NAEE cumulative-tail skipping and MC-MoE token-importance skipping.

Every baseline keeps a non-empty prefix of each token's vanilla top-K ranking.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from dessim.core import ConfigError, PoolConfig, RouterBlock, RoutingAssignment
from dessim.gating import activate, topk_indices

# tail sums this close to the threshold count as not below it
_TAIL_EPS = 1e-12


class BaselineMethod(str, Enum):
    TOPK_REDUCE = "topk_reduce"
    NAEE = "naee"
    MCMOE = "mcmoe"


class ImportanceScore(str, Enum):
    MAX_GATE = "max_gate"
    NEG_ENTROPY = "neg_entropy"


class BaselineParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: BaselineMethod
    k_reduced: int | None = None
    naee_beta: float | None = None
    mcmoe_beta: float | None = None
    mcmoe_important_fraction: float | None = None
    mcmoe_score: ImportanceScore = ImportanceScore.MAX_GATE


def _ranked_rows(block: RouterBlock, cfg: PoolConfig, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    probs = activate(block, cfg).probs
    rows = []
    for row in probs:
        idx = topk_indices(row, k)
        rows.append((idx, row[idx]))
    return rows


def _normalized(idx: np.ndarray, weights: np.ndarray) -> tuple[tuple[int, ...], tuple[float, ...]]:
    total = weights.sum()
    return tuple(int(i) for i in idx), tuple(float(w) for w in weights / total)


def topk_reduce_route(block: RouterBlock, cfg: PoolConfig, k_reduced: int) -> RoutingAssignment:
    if not 1 <= k_reduced <= cfg.top_k:
        raise ConfigError("1 <= k_reduced <= K", f"k_reduced={k_reduced}, K={cfg.top_k}")
    return RoutingAssignment.from_rows([_normalized(idx, w) for idx, w in _ranked_rows(block, cfg, k_reduced)])


def naee_keep_count(weights: Sequence[float], beta: float) -> int:
    """How many leading ranks survive NAEE skipping of a descending weight list.

    Ranks i..K are dropped for the smallest i >= 2 whose tail sum falls below
    beta times the total; rank 1 always stays.
    """
    w = np.asarray(weights, dtype=np.float64)
    threshold = beta * w.sum()
    tail = 0.0
    tails = np.empty(len(w))
    for pos in range(len(w) - 1, -1, -1):
        tail += w[pos]
        tails[pos] = tail
    for pos in range(1, len(w)):
        if tails[pos] < threshold - _TAIL_EPS:
            return pos
    return len(w)


def _check_fraction(name: str, value: float, low_open: bool = True) -> None:
    ok = (0 < value < 1) if low_open else (0 <= value <= 1)
    if not ok:
        raise ConfigError(f"{name} in range", f"{name}={value}")


def naee_route(block: RouterBlock, cfg: PoolConfig, beta: float) -> RoutingAssignment:
    _check_fraction("naee_beta", beta)
    out = []
    for idx, w in _ranked_rows(block, cfg, cfg.top_k):
        keep = naee_keep_count(w, beta)
        out.append(_normalized(idx[:keep], w[:keep]))
    return RoutingAssignment.from_rows(out)


def importance_scores(probs: np.ndarray, score: ImportanceScore = ImportanceScore.MAX_GATE) -> np.ndarray:
    if score is ImportanceScore.MAX_GATE:
        return probs.max(axis=1)
    p = probs / probs.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return plogp.sum(axis=1)


def mcmoe_route(
    block: RouterBlock,
    cfg: PoolConfig,
    beta: float,
    important_fraction: float,
    score: ImportanceScore = ImportanceScore.MAX_GATE,
) -> RoutingAssignment:
    """Confident tokens keep their full top-K; the rest are NAEE-skipped."""
    _check_fraction("mcmoe_beta", beta)
    _check_fraction("mcmoe_important_fraction", important_fraction, low_open=False)
    probs = activate(block, cfg).probs
    n = probs.shape[0]
    n_important = min(n, math.ceil(important_fraction * n - 1e-9))
    order = np.argsort(-importance_scores(probs, score), kind="stable")
    important = set(int(t) for t in order[:n_important])

    out = []
    for t, (idx, w) in enumerate(_ranked_rows(block, cfg, cfg.top_k)):
        keep = len(w) if t in important else naee_keep_count(w, beta)
        out.append(_normalized(idx[:keep], w[:keep]))
    return RoutingAssignment.from_rows(out)


def baseline_run(block: RouterBlock, cfg: PoolConfig, params: BaselineParams) -> RoutingAssignment:
    if params.method is BaselineMethod.TOPK_REDUCE:
        if params.k_reduced is None:
            raise ConfigError("k_reduced present for topk_reduce")
        return topk_reduce_route(block, cfg, params.k_reduced)
    if params.method is BaselineMethod.NAEE:
        if params.naee_beta is None:
            raise ConfigError("naee_beta present for naee")
        return naee_route(block, cfg, params.naee_beta)
    if params.mcmoe_beta is None or params.mcmoe_important_fraction is None:
        raise ConfigError("mcmoe_beta and mcmoe_important_fraction present for mcmoe")
    return mcmoe_route(block, cfg, params.mcmoe_beta, params.mcmoe_important_fraction, params.mcmoe_score)
