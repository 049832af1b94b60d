"""
Tool server exposing the simulator's analytic pieces over MCP (stdio only).

Run with ``dessim serve`` or ``python -m dessim.server``.
"""

import json

from mcp.server.fastmcp import FastMCP
from pydantic import ValidationError

from dessim import __version__
from dessim.analysis import LatencyParams, coreset_latency_bound, expected_unique_experts, memory_footprint, moe_latency
from dessim.cli import apply_method, parse_method
from dessim.core import (
    Coreset,
    DessimError,
    GateActivation,
    PoolConfig,
    RouterBlock,
    RoutingAssignment,
    load_settings,
    validate_config,
)
from dessim.gating import vanilla_route
from dessim.metrics import topk_recall

mcp = FastMCP("DES Simulator")


def _pool(logits: list[list[float]], top_k: int, gate_activation: str) -> tuple[RouterBlock, PoolConfig]:
    block = RouterBlock(logits)
    cfg = validate_config(
        PoolConfig(experts_total=block.experts_total, top_k=top_k, gate_activation=GateActivation(gate_activation))
    )
    return block, cfg


# 1. TOOLS


@mcp.tool()
def coreset_size(
    logits: list[list[float]],
    top_k: int,
    method: str = "des-vote:0.15",
    gate_activation: str = "softmax",
) -> str:
    """Select a shared expert coreset for one decoding block.

    Args:
        logits: router logits, one row of M values per token
        top_k: experts per token K
        method: des-seq:k or des-vote:beta
        gate_activation: softmax or sigmoid
    """
    try:
        block, cfg = _pool(logits, top_k, gate_activation)
        spec = parse_method(method)
        if not spec.shares_coreset:
            return f"Error: {method!r} does not build a coreset; use des-seq:k or des-vote:beta"
        result = apply_method(block, cfg, spec)
        vanilla = vanilla_route(block, cfg)
        return json.dumps(
            {
                "coreset": list(result.coreset.members),
                "size": len(result.coreset),
                "recall": topk_recall(vanilla, result.coreset, top_k),
            },
            indent=2,
        )
    except (DessimError, ValidationError, ValueError) as e:
        return f"Error: {e}"


@mcp.tool(name="expected_unique_experts")
def expected_unique(experts_total: int, top_k: int, block_size: int) -> str:
    """Expected number of distinct experts a block of independent uniform tokens activates.

    Args:
        experts_total: pool size M
        top_k: experts per token K
        block_size: tokens in the block N
    """
    try:
        value = expected_unique_experts(experts_total, top_k, block_size)
    except DessimError as e:
        return f"Error: {e}"
    return json.dumps({"experts_total": experts_total, "top_k": top_k, "block_size": block_size, "expected": value})


@mcp.tool()
def route_block(
    logits: list[list[float]],
    top_k: int,
    method: str = "vanilla",
    gate_activation: str = "softmax",
) -> str:
    """Route every token of a block with one method and report the assignment.

    Args:
        logits: router logits, one row of M values per token
        top_k: experts per token K
        method: vanilla | des-seq:k | des-vote:beta | topk:k | naee:beta | mcmoe:beta:fraction
        gate_activation: softmax or sigmoid
    """
    try:
        block, cfg = _pool(logits, top_k, gate_activation)
        result = apply_method(block, cfg, parse_method(method))
        return json.dumps(
            {
                "selected": [list(s) for s in result.assignment.selected],
                "gates": [list(g) for g in result.assignment.gates],
                "coreset": list(result.coreset.members) if result.coreset is not None else None,
                "unique_experts": len(result.served),
            },
            indent=2,
        )
    except (DessimError, ValidationError, ValueError) as e:
        return f"Error: {e}"


@mcp.tool()
def latency_model(
    selected: list[list[int]],
    experts_total: int,
    a: float | None = None,
    b: float | None = None,
    bound_size: int | None = None,
) -> str:
    """Modelled layer latency b*|unique| + a*selections for a routing assignment.

    Args:
        selected: each token's selected expert indices
        experts_total: pool size M
        a: compute cost per token per expert (default from DESSIM_LATENCY_A)
        b: weight-fetch cost per expert (default from DESSIM_LATENCY_B)
        bound_size: coreset size; when given, also report the coreset upper bound
    """
    settings = load_settings()
    try:
        params = LatencyParams(a=settings.latency_a if a is None else a, b=settings.latency_b if b is None else b)
        assign = RoutingAssignment.from_rows([(sel, [1.0 / len(sel)] * len(sel)) for sel in selected])
        report = moe_latency(assign, params, experts_total, settings.bytes_per_expert)
        payload = {
            "unique_experts": report.unique_experts,
            "latency": report.latency,
            "memory_bytes": report.memory_bytes,
        }
        if bound_size is not None:
            K = max((len(sel) for sel in selected), default=0)
            bound_set = Coreset(tuple(range(bound_size)))
            payload["coreset_bound"] = coreset_latency_bound(bound_set, assign.n_tokens, K, params)
        return json.dumps(payload, indent=2)
    except (DessimError, ValidationError, ValueError, IndexError, ZeroDivisionError) as e:
        return f"Error: {e}"


@mcp.tool(name="memory_footprint")
def memory(unique_experts: int, bytes_per_expert: float | None = None) -> str:
    """Bytes of expert weights resident for a layer.

    Args:
        unique_experts: distinct experts loaded
        bytes_per_expert: defaults to DESSIM_BYTES_PER_EXPERT
    """
    if unique_experts < 0:
        return "Error: unique_experts must be >= 0"
    per_expert = load_settings().bytes_per_expert if bytes_per_expert is None else bytes_per_expert
    total = memory_footprint(unique_experts, per_expert)
    return json.dumps({"unique_experts": unique_experts, "bytes": total, "gigabytes": total / 1e9})


# 2. RESOURCES


@mcp.resource("info://version")
def version() -> str:
    """Package version string"""
    return __version__


@mcp.resource("info://capabilities")
def capabilities() -> str:
    """Methods and tools this server understands"""
    return json.dumps(
        {
            "methods": ["vanilla", "des-seq:k", "des-vote:beta", "topk:k", "naee:beta", "mcmoe:beta:fraction"],
            "gate_activations": [g.value for g in GateActivation],
            "tools": ["coreset_size", "expected_unique_experts", "route_block", "latency_model", "memory_footprint"],
        },
        indent=2,
    )


# 3. PROMPTS


@mcp.prompt(description="Ask how many experts a block activates")
def ask_explosion() -> str:
    return "How many distinct experts does a block of 32 tokens activate with M=256 and K=8?"


@mcp.prompt(description="Compare DES-Vote with vanilla routing on a block")
def compare_strategies() -> str:
    return (
        "Route this block with vanilla and with des-vote:0.15, then compare unique experts "
        "and modelled latency."
    )


if __name__ == "__main__":
    mcp.run(transport="stdio")
