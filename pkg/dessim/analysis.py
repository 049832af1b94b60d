"""
Analytic cost models for one MoE layer serving one decoding block.

Per expert the cost is f(c) = a*c + b for c > 0 tokens: b is the weight fetch
from HBM, a the marginal compute per token. Routing and gather overheads are
not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from dessim.core import ConfigError, ConsistencyError, Coreset, RoutingAssignment


class LatencyParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    a: float = Field(default=0.1, ge=0)
    b: float = Field(default=1.0, ge=0)


@dataclass(frozen=True)
class TrafficReport:
    unique_experts: int
    latency: float
    memory_bytes: float
    per_expert_counts: np.ndarray

    @property
    def routed_tokens(self) -> int:
        return int(self.per_expert_counts.sum())


def moe_latency(
    assign: RoutingAssignment,
    params: LatencyParams,
    experts_total: int | None = None,
    bytes_per_expert: float = 0.0,
) -> TrafficReport:
    """Layer latency, evaluated both per expert and in union form, in exact arithmetic."""
    if experts_total is None:
        experts_total = 1 + max((i for sel in assign.selected for i in sel), default=-1)
    cnt = assign.counts(experts_total)
    a, b = Fraction(params.a), Fraction(params.b)

    per_expert = sum((b * int(c > 0) + a * c for c in cnt.tolist()), Fraction(0))
    unique = int(np.count_nonzero(cnt))
    union_form = b * unique + a * assign.selection_count()
    if per_expert != union_form:
        raise ConsistencyError(f"latency forms disagree: {per_expert} != {union_form}")

    return TrafficReport(
        unique_experts=unique,
        latency=float(union_form),
        memory_bytes=memory_footprint(unique, bytes_per_expert),
        per_expert_counts=cnt,
    )


def coreset_latency_bound(coreset: Coreset, N: int, K: int, params: LatencyParams) -> float:
    """b*|C| + a*N*K: no assignment routed inside the coreset costs more."""
    return float(Fraction(params.b) * len(coreset) + Fraction(params.a) * (N * K))


def expected_unique_experts(M: int, K: int, N: int) -> float:
    """Mean union size of N independent uniform K-subsets of M experts."""
    if not 1 <= K <= M:
        raise ConfigError("1 <= K <= M", f"K={K}, M={M}")
    if N < 1:
        raise ConfigError("N >= 1", f"N={N}")
    return M * (1.0 - (1.0 - K / M) ** N)


def memory_footprint(unique: int, bytes_per_expert: float) -> float:
    return unique * bytes_per_expert


def latency_reduction(reference: TrafficReport, candidate: TrafficReport) -> float:
    """Fraction of the reference latency saved by the candidate."""
    if reference.latency == 0:
        return 0.0
    return 1.0 - candidate.latency / reference.latency


def operational_intensity(report: TrafficReport, flops_per_token_expert: float, bytes_per_expert: float) -> float:
    """FLOPs per byte fetched for the layer; reporting only."""
    fetched = report.unique_experts * bytes_per_expert
    if fetched == 0:
        return 0.0
    return report.routed_tokens * flops_per_token_expert / fetched
