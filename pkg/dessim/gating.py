"""
Vanilla MoE routing: activation, per-token top-K, gate normalization and the
weighted expert sum against a synthetic expert bank.

Ties in every top-K are broken by the lower expert index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dessim.core import (
    ConfigError,
    Coreset,
    GateActivation,
    PoolConfig,
    Rng,
    RouterBlock,
    RoutingAssignment,
    ShapeError,
)


@dataclass(frozen=True)
class GateMatrix:
    """Post-activation router weights, one row per token."""

    probs: np.ndarray
    activation: GateActivation = GateActivation.SOFTMAX

    @property
    def experts_total(self) -> int:
        return self.probs.shape[1]


def activate(block: RouterBlock, cfg: PoolConfig) -> GateMatrix:
    block.check(cfg)
    logits = block.logits
    if cfg.gate_activation is GateActivation.SOFTMAX:
        probs = softmax_rows(logits)
    else:
        probs = 1.0 / (1.0 + np.exp(-logits))
    return GateMatrix(probs=probs, activation=cfg.gate_activation)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def topk_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending; equal values keep index order."""
    return np.argsort(-row, kind="stable")[:k]


def select_and_normalize(row: np.ndarray, k: int, allowed: np.ndarray | None = None) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """Top-k of ``row`` (optionally restricted to ``allowed``), gates divided by their sum."""
    if allowed is not None:
        row = np.where(allowed, row, -np.inf)
        k = min(k, int(allowed.sum()))
    idx = topk_indices(row, k)
    weights = row[idx]
    total = weights.sum()
    if total > 0:
        weights = weights / total
    else:
        weights = np.full(len(idx), 1.0 / len(idx))
    return tuple(int(i) for i in idx), tuple(float(w) for w in weights)


def topk_route(gates: GateMatrix, K: int) -> RoutingAssignment:
    if not 1 <= K <= gates.experts_total:
        raise ConfigError("1 <= K <= experts_total", f"K={K}, M={gates.experts_total}")
    return RoutingAssignment.from_rows([select_and_normalize(row, K) for row in gates.probs])


def vanilla_route(block: RouterBlock, cfg: PoolConfig) -> RoutingAssignment:
    return topk_route(activate(block, cfg), cfg.top_k)


def unique_experts(assigns: RoutingAssignment) -> Coreset:
    return Coreset.of(i for sel in assigns.selected for i in sel)


@dataclass(frozen=True)
class ExpertBank:
    """Synthetic experts: M fixed random D x D linear maps plus N token inputs.

    Entries are i.i.d. standard normal scaled by 1/sqrt(D). The weights and the
    inputs come from separate child streams, so the experts for a seed do not
    depend on how many tokens were drawn.
    """

    weights: np.ndarray  # (M, D, D)
    token_inputs: np.ndarray  # (N, D)

    @classmethod
    def build(cls, cfg: PoolConfig, n_tokens: int, seed: int) -> "ExpertBank":
        weight_rng, input_rng = Rng(seed).spawn(2)
        d = cfg.hidden_dim
        weights = weight_rng.normal((cfg.experts_total, d, d)) / np.sqrt(d)
        inputs = input_rng.normal((n_tokens, d))
        return cls(weights=weights, token_inputs=inputs)

    @property
    def experts_total(self) -> int:
        return self.weights.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.weights.shape[1]

    def expert_output(self, i: int, x: np.ndarray) -> np.ndarray:
        return self.weights[i] @ x

    def expert_outputs(self) -> np.ndarray:
        """Every expert applied to every token: (N, M, D)."""
        return np.einsum("mij,nj->nmi", self.weights, self.token_inputs)

    def check(self, cfg: PoolConfig) -> "ExpertBank":
        if self.experts_total != cfg.experts_total or self.hidden_dim != cfg.hidden_dim:
            raise ShapeError(
                f"bank is M={self.experts_total}, D={self.hidden_dim}; "
                f"pool is M={cfg.experts_total}, D={cfg.hidden_dim}"
            )
        return self


def token_forward(selected, gates, bank: ExpertBank, x: np.ndarray) -> np.ndarray:
    y = np.zeros(bank.hidden_dim)
    for i, g in sorted(zip(selected, gates)):
        y += g * bank.expert_output(i, x)
    return y


def moe_forward(assign: RoutingAssignment, bank: ExpertBank) -> np.ndarray:
    """Per-token weighted sum of expert outputs, summed in ascending expert order."""
    if assign.n_tokens != bank.token_inputs.shape[0]:
        raise ShapeError(f"assignment has {assign.n_tokens} tokens, bank has {bank.token_inputs.shape[0]} inputs")
    out = np.zeros((assign.n_tokens, bank.hidden_dim))
    for n, (sel, g) in enumerate(zip(assign.selected, assign.gates)):
        if any(not 0 <= i < bank.experts_total for i in sel):
            raise ShapeError(f"token {n} selects an expert outside the bank")
        out[n] = token_forward(sel, g, bank, bank.token_inputs[n])
    return out
