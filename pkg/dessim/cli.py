"""
dessim command line: trace generation, strategy runs, sweeps, expert-explosion
curves, oracle-gap reports and the stdio tool server.

Reports go to stdout or ``-o FILE`` as CSV (versioned comment line first) or
JSON. Exit codes: 0 success, 1 user error, 2 internal error.

Settings precedence: flag > ``--config`` JSON file > DESSIM_* environment > default.
"""

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Annotated, Any, Optional

import click
import numpy as np
import typer
from mcp.server.fastmcp.utilities.logging import configure_logging, get_logger
from pydantic import BaseModel, ConfigDict, ValidationError

from dessim import __version__
from dessim.analysis import (
    LatencyParams,
    coreset_latency_bound,
    expected_unique_experts,
    latency_reduction,
    moe_latency,
)
from dessim.baselines import mcmoe_route, naee_route, topk_reduce_route
from dessim.core import (
    ConfigError,
    Coreset,
    DessimError,
    GuardError,
    PoolConfig,
    RouterBlock,
    RoutingAssignment,
    load_settings,
    validate_config,
)
from dessim.des import VoteSource, VoteVector, constrained_route, des_seq_coreset, des_vote_coreset, m_core
from dessim.gating import ExpertBank, unique_experts, vanilla_route
from dessim.metrics import (
    activation_frequency_curve,
    assignment_loss,
    hit_rate_cosine,
    hit_rate_vector,
    retained_vote_mass,
    selection_recall,
    topk_recall,
)
from dessim.oracle import (
    MAX_RECONSTRUCTION_EXPERTS,
    MAX_RECONSTRUCTION_TOKENS,
    exhaustive_additive_coreset,
    mc_unique_experts,
    reconstruction_losses,
)
from dessim.trace import SynthModel, SynthParams, TraceFile, gen_trace, read_trace, trace_blocks, write_trace

logger = get_logger(__name__)

CSV_SCHEMA = "dessim-csv v1"
JSON_SCHEMA = "dessim-report/1"
ACCURACY_PROXY = "recall,reconstruction_loss"
ORACLE_TOLERANCE = 1e-12

app = typer.Typer(
    name="dessim",
    help="Dynamic Expert Sharing simulator for MoE routing under block-parallel decoding.",
    no_args_is_help=True,
    add_completion=False,
)


# ---------------------------------------------------------------------------
# Config file and settings
# ---------------------------------------------------------------------------


class RunConfig(BaseModel):
    """Keys accepted in a ``--config`` JSON file. Flags override them."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    experts: Optional[int] = None
    top_k: Optional[int] = None
    block: Optional[int] = None
    layers: Optional[int] = None
    steps: Optional[int] = None
    model: Optional[SynthModel] = None
    rho: Optional[float] = None
    temperature: Optional[float] = None
    alpha: Optional[float] = None
    seed: Optional[int] = None
    a: Optional[float] = None
    b: Optional[float] = None
    bytes_per_expert: Optional[float] = None
    bank_seed: Optional[int] = None
    hidden_dim: Optional[int] = None
    method: Optional[list[str]] = None
    betas: Optional[list[float]] = None
    ks: Optional[list[int]] = None
    blocks: Optional[list[int]] = None
    trials: Optional[int] = None
    instances: Optional[int] = None
    beta: Optional[float] = None
    workers: Optional[int] = None


def load_run_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("config file readable", str(e))
    except ValidationError as e:
        raise ConfigError("config file schema", str(e).splitlines()[0])


def pick(flag: Any, config: RunConfig, key: str, default: Any) -> Any:
    if flag is not None:
        return flag
    value = getattr(config, key)
    return default if value is None else value


def parse_list(text: Optional[str], kind=float) -> Optional[list]:
    if text is None:
        return None
    try:
        return [kind(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError("comma-separated list", str(e))


# ---------------------------------------------------------------------------
# Methods
# ---------------------------------------------------------------------------


class MethodName(str, Enum):
    VANILLA = "vanilla"
    DES_SEQ = "des-seq"
    DES_VOTE = "des-vote"
    TOPK = "topk"
    NAEE = "naee"
    MCMOE = "mcmoe"


@dataclass(frozen=True)
class MethodSpec:
    name: MethodName
    k: Optional[int] = None
    beta: Optional[float] = None
    fraction: Optional[float] = None
    route_k: Optional[int] = None
    source: Optional[VoteSource] = None

    @property
    def label(self) -> str:
        args = [f"{v:g}" for v in (self.k, self.beta, self.fraction, self.route_k) if v is not None]
        if self.source is not None:
            if self.route_k is None:
                args.append("")
            args.append(self.source.value)
        return ":".join([self.name.value, *args])

    @property
    def shares_coreset(self) -> bool:
        return self.name in (MethodName.DES_SEQ, MethodName.DES_VOTE)


@dataclass(frozen=True)
class MethodResult:
    assignment: RoutingAssignment
    coreset: Optional[Coreset] = None
    votes: Optional[VoteVector] = None

    @property
    def served(self) -> Coreset:
        return self.coreset if self.coreset is not None else unique_experts(self.assignment)


def parse_method(spec: str) -> MethodSpec:
    """``vanilla``, ``des-seq:K[:ROUTE_K]``, ``des-vote:BETA[:ROUTE_K[:SOURCE]]``, ``topk:K``,
    ``naee:BETA``, ``mcmoe:BETA:FRACTION``.

    ROUTE_K narrows constrained routing below K (empty keeps K); SOURCE is weights,
    logits or uniform.
    """
    name, *args = spec.strip().split(":")
    try:
        method = MethodName(name)
    except ValueError:
        raise ConfigError("known method", f"unknown method {name!r}")
    low, high = {
        MethodName.VANILLA: (0, 0),
        MethodName.DES_SEQ: (1, 2),
        MethodName.DES_VOTE: (1, 3),
        MethodName.TOPK: (1, 1),
        MethodName.NAEE: (1, 1),
        MethodName.MCMOE: (2, 2),
    }[method]
    if not low <= len(args) <= high:
        takes = str(low) if low == high else f"{low} to {high}"
        raise ConfigError("method arguments", f"{name} takes {takes} argument(s), got {len(args)}")
    try:
        route_k = int(args[1]) if method.value.startswith("des-") and len(args) > 1 and args[1] else None
        if method is MethodName.DES_SEQ:
            return MethodSpec(method, k=int(args[0]), route_k=route_k)
        if method is MethodName.DES_VOTE:
            source = VoteSource(args[2]) if len(args) > 2 else None
            return MethodSpec(method, beta=float(args[0]), route_k=route_k, source=source)
        if method is MethodName.TOPK:
            return MethodSpec(method, k=int(args[0]))
        if method is MethodName.NAEE:
            return MethodSpec(method, beta=float(args[0]))
        if method is MethodName.MCMOE:
            return MethodSpec(method, beta=float(args[0]), fraction=float(args[1]))
    except ValueError as e:
        raise ConfigError("numeric method arguments", str(e))
    return MethodSpec(method)


def apply_method(block: RouterBlock, cfg: PoolConfig, spec: MethodSpec) -> MethodResult:
    if spec.route_k is not None and not 1 <= spec.route_k <= cfg.top_k:
        raise ConfigError("1 <= route_k <= K", f"route_k={spec.route_k}, K={cfg.top_k}")
    if spec.name is MethodName.VANILLA:
        return MethodResult(vanilla_route(block, cfg))
    if spec.name is MethodName.DES_SEQ:
        coreset = des_seq_coreset(block, cfg, spec.k)
        return MethodResult(constrained_route(block, cfg, coreset, spec.route_k), coreset)
    if spec.name is MethodName.DES_VOTE:
        coreset, votes = des_vote_coreset(block, cfg, spec.beta, spec.source or VoteSource.WEIGHTS)
        return MethodResult(constrained_route(block, cfg, coreset, spec.route_k), coreset, votes)
    if spec.name is MethodName.TOPK:
        return MethodResult(topk_reduce_route(block, cfg, spec.k))
    if spec.name is MethodName.NAEE:
        return MethodResult(naee_route(block, cfg, spec.beta))
    return MethodResult(mcmoe_route(block, cfg, spec.beta, spec.fraction))


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


class OutputFormat(str, Enum):
    CSV = "csv"
    JSON = "json"


@dataclass
class Report:
    command: str
    columns: list[str]
    rows: list[dict[str, Any]]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return "nan" if math.isnan(value) else f"{float(value):.10g}"
    return str(value)


def _json_value(value: Any) -> Any:
    if isinstance(value, (np.floating, float)):
        return None if math.isnan(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def render_report(report: Report, fmt: OutputFormat) -> str:
    if fmt is OutputFormat.JSON:
        payload = {
            "schema": JSON_SCHEMA,
            "command": report.command,
            "accuracy_proxy": ACCURACY_PROXY,
            "columns": report.columns,
            "rows": [{c: _json_value(row.get(c)) for c in report.columns} for row in report.rows],
        }
        return json.dumps(payload, indent=2) + "\n"
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA} command={report.command} accuracy-proxy={ACCURACY_PROXY}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(report.columns)
    for row in report.rows:
        writer.writerow([_cell(row.get(c)) for c in report.columns])
    return buf.getvalue()


def emit(report: Report, fmt: OutputFormat, output: Optional[Path]) -> None:
    text = render_report(report, fmt)
    if output is None:
        typer.echo(text, nl=False)
    else:
        with open(output, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        logger.info("wrote %d rows to %s", len(report.rows), output)


def mean_row(rows: list[dict[str, Any]], columns: list[str], **fixed: Any) -> dict[str, Any]:
    out: dict[str, Any] = dict(fixed)
    for c in columns:
        if c in out:
            continue
        values = [r[c] for r in rows if isinstance(r.get(c), (int, float, np.integer, np.floating)) and not isinstance(r.get(c), bool)]
        values = [v for v in values if not (isinstance(v, float) and math.isnan(v))]
        out[c] = float(np.mean(values)) if values else None
    return out


# ---------------------------------------------------------------------------
# Shared option types
# ---------------------------------------------------------------------------

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", help="JSON config file; flags override it.")]
OutputOpt = Annotated[Optional[Path], typer.Option("--output", "-o", help="Write the report here instead of stdout.")]
FormatOpt = Annotated[OutputFormat, typer.Option("--format", help="Report format.")]
TraceArg = Annotated[Path, typer.Option("--trace", "-t", help="Trace file (.moet or .jsonl).")]


@app.callback()
def _configure(
    log_level: Annotated[Optional[str], typer.Option("--log-level", help="Logging level.")] = None,
) -> None:
    settings = load_settings()
    configure_logging((log_level or settings.log_level).upper())


def _pool(trace: TraceFile, hidden_dim: int, bytes_per_expert: float) -> PoolConfig:
    return trace.pool_config(hidden_dim=hidden_dim, bytes_per_expert=bytes_per_expert)


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------


@app.command("gen-trace")
def cmd_gen_trace(
    output: Annotated[Path, typer.Option("--output", "-o", help="Trace file to write (.moet or .jsonl).")],
    experts: Annotated[Optional[int], typer.Option("--experts", help="Expert pool size M.")] = None,
    top_k: Annotated[Optional[int], typer.Option("--top-k", help="Experts per token K.")] = None,
    block: Annotated[Optional[int], typer.Option("--block", help="Parallel block size N.")] = None,
    layers: Annotated[Optional[int], typer.Option("--layers")] = None,
    steps: Annotated[Optional[int], typer.Option("--steps")] = None,
    model: Annotated[Optional[SynthModel], typer.Option("--model")] = None,
    rho: Annotated[Optional[float], typer.Option("--rho", help="Cross-token correlation in [0, 1].")] = None,
    temperature: Annotated[Optional[float], typer.Option("--temperature")] = None,
    alpha: Annotated[Optional[float], typer.Option("--alpha", help="Dirichlet concentration.")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    config: ConfigOpt = None,
) -> None:
    """Generate a synthetic router trace."""
    cfg_file = load_run_config(config)
    experts = pick(experts, cfg_file, "experts", None)
    top_k = pick(top_k, cfg_file, "top_k", None)
    block = pick(block, cfg_file, "block", None)
    if experts is None or top_k is None or block is None:
        raise click.UsageError("--experts, --top-k and --block are required (flag or --config)")

    cfg = validate_config(PoolConfig(experts_total=experts, top_k=top_k))
    params = SynthParams(
        model=pick(model, cfg_file, "model", SynthModel.SHARED_BIAS),
        rho=pick(rho, cfg_file, "rho", 0.0),
        temperature=pick(temperature, cfg_file, "temperature", 1.0),
        dirichlet_alpha=pick(alpha, cfg_file, "alpha", 1.0),
    )
    trace = gen_trace(
        cfg,
        params,
        layers=pick(layers, cfg_file, "layers", 1),
        steps=pick(steps, cfg_file, "steps", 1),
        N=block,
        seed=pick(seed, cfg_file, "seed", 0),
    )
    write_trace(trace, output)
    typer.echo(json.dumps(trace.header.model_dump(mode="json"), sort_keys=True), err=True)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

RUN_COLUMNS = [
    "step",
    "layer",
    "method",
    "coreset_size",
    "unique_experts",
    "latency",
    "latency_bound",
    "latency_reduction",
    "memory_bytes",
    "recall",
    "selection_recall",
    "retained_vote_mass",
    "reconstruction_loss",
]


def block_row(
    block: RouterBlock,
    cfg: PoolConfig,
    spec: MethodSpec,
    latency: LatencyParams,
    bank: Optional[ExpertBank],
) -> dict[str, Any]:
    vanilla = vanilla_route(block, cfg)
    result = apply_method(block, cfg, spec)
    base = moe_latency(vanilla, latency, cfg.experts_total, cfg.bytes_per_expert)
    report = moe_latency(result.assignment, latency, cfg.experts_total, cfg.bytes_per_expert)
    row: dict[str, Any] = {
        "method": spec.label,
        "coreset_size": len(result.coreset) if result.coreset is not None else None,
        "unique_experts": report.unique_experts,
        "latency": report.latency,
        "latency_bound": (
            coreset_latency_bound(result.coreset, block.block_size, cfg.top_k, latency)
            if result.coreset is not None
            else None
        ),
        "latency_reduction": latency_reduction(base, report),
        "memory_bytes": report.memory_bytes,
        "recall": topk_recall(vanilla, result.served, cfg.top_k),
        "selection_recall": selection_recall(vanilla, result.assignment, cfg.top_k),
        "reconstruction_loss": None,
        "retained_vote_mass": None,
    }
    if result.coreset is not None:
        votes = result.votes if result.votes is not None else des_vote_coreset(block, cfg, 1.0)[1]
        row["retained_vote_mass"] = retained_vote_mass(votes, result.coreset)
    if bank is not None:
        row["reconstruction_loss"] = assignment_loss(vanilla, result.assignment, bank).mean
    return row


@app.command("run")
def cmd_run(
    trace: TraceArg,
    method: Annotated[Optional[str], typer.Option("--method", "-m", help="vanilla | des-seq:k | des-vote:beta | topk:k | naee:beta | mcmoe:beta:fraction")] = None,
    a: Annotated[Optional[float], typer.Option("--a", help="Compute cost per token per expert.")] = None,
    b: Annotated[Optional[float], typer.Option("--b", help="Weight-fetch cost per expert.")] = None,
    bytes_per_expert: Annotated[Optional[float], typer.Option("--bytes-per-expert")] = None,
    bank_seed: Annotated[Optional[int], typer.Option("--bank-seed", help="Enables reconstruction loss.")] = None,
    hidden_dim: Annotated[Optional[int], typer.Option("--hidden-dim")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """Run one method over every block of a trace."""
    settings = load_settings()
    cfg_file = load_run_config(config)
    spec = parse_method(method or (cfg_file.method[0] if cfg_file.method else "vanilla"))
    latency = LatencyParams(a=pick(a, cfg_file, "a", settings.latency_a), b=pick(b, cfg_file, "b", settings.latency_b))
    data = read_trace(trace)
    cfg = _pool(
        data,
        pick(hidden_dim, cfg_file, "hidden_dim", 32),
        pick(bytes_per_expert, cfg_file, "bytes_per_expert", settings.bytes_per_expert),
    )
    seed = pick(bank_seed, cfg_file, "bank_seed", None)
    bank = ExpertBank.build(cfg, data.header.block_size, seed) if seed is not None else None

    rows = []
    for step, layer, block in trace_blocks(data):
        rows.append({"step": step, "layer": layer, **block_row(block, cfg, spec, latency, bank)})
    rows.append(mean_row(rows, RUN_COLUMNS, step="mean", layer="", method=spec.label))
    logger.info("%s over %d blocks", spec.label, len(rows) - 1)
    emit(Report("run", RUN_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = [
    "strategy",
    "parameter",
    "coreset_size",
    "unique_experts",
    "recall",
    "retained_vote_mass",
    "reconstruction_loss",
    "latency",
    "latency_bound",
]


class SweepStrategy(str, Enum):
    VOTE = "des-vote"
    SEQ = "des-seq"
    BOTH = "both"


def sweep_point(
    data: TraceFile,
    cfg: PoolConfig,
    spec: MethodSpec,
    latency: LatencyParams,
    bank: Optional[ExpertBank],
) -> dict[str, Any]:
    rows = []
    for _, _, block in trace_blocks(data):
        rows.append(block_row(block, cfg, spec, latency, bank))
    parameter = spec.beta if spec.name is MethodName.DES_VOTE else spec.k
    return mean_row(rows, SWEEP_COLUMNS, strategy=spec.name.value, parameter=parameter)


@app.command("sweep")
def cmd_sweep(
    trace: TraceArg,
    strategy: Annotated[SweepStrategy, typer.Option("--strategy")] = SweepStrategy.BOTH,
    betas: Annotated[Optional[str], typer.Option("--betas", help="Comma-separated beta grid.")] = None,
    ks: Annotated[Optional[str], typer.Option("--ks", help="Comma-separated k grid.")] = None,
    a: Annotated[Optional[float], typer.Option("--a")] = None,
    b: Annotated[Optional[float], typer.Option("--b")] = None,
    bank_seed: Annotated[Optional[int], typer.Option("--bank-seed")] = None,
    hidden_dim: Annotated[Optional[int], typer.Option("--hidden-dim")] = None,
    workers: Annotated[Optional[int], typer.Option("--workers")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """Coreset size vs recall vs loss vs modelled latency over a beta or k grid."""
    settings = load_settings()
    cfg_file = load_run_config(config)
    data = read_trace(trace)
    cfg = _pool(data, pick(hidden_dim, cfg_file, "hidden_dim", 32), settings.bytes_per_expert)
    latency = LatencyParams(a=pick(a, cfg_file, "a", settings.latency_a), b=pick(b, cfg_file, "b", settings.latency_b))
    seed = pick(bank_seed, cfg_file, "bank_seed", None)
    bank = ExpertBank.build(cfg, data.header.block_size, seed) if seed is not None else None

    beta_grid = pick(parse_list(betas), cfg_file, "betas", [round(0.1 * i, 10) for i in range(1, 11)])
    k_grid = pick(parse_list(ks, int), cfg_file, "ks", list(range(1, cfg.top_k + 1)))
    specs: list[MethodSpec] = []
    if strategy in (SweepStrategy.VOTE, SweepStrategy.BOTH):
        specs += [MethodSpec(MethodName.DES_VOTE, beta=float(v)) for v in beta_grid]
    if strategy in (SweepStrategy.SEQ, SweepStrategy.BOTH):
        specs += [MethodSpec(MethodName.DES_SEQ, k=int(v)) for v in k_grid]
    if not specs:
        raise ConfigError("non-empty grid")
    for spec in specs:
        if spec.name is MethodName.DES_VOTE and not (0 < spec.beta <= 1 and m_core(spec.beta, cfg.experts_total) >= 1):
            raise ConfigError("0 < beta <= 1 and floor(beta * M) >= 1", f"beta={spec.beta}")
        if spec.name is MethodName.DES_SEQ and not 1 <= spec.k <= cfg.top_k:
            raise ConfigError("1 <= k <= K", f"k={spec.k}")

    n_workers = pick(workers, cfg_file, "workers", settings.workers)
    with ThreadPoolExecutor(max_workers=max(1, n_workers)) as pool:
        rows = list(pool.map(lambda s: sweep_point(data, cfg, s, latency, bank), specs))
    rows.sort(key=lambda r: (r["strategy"], r["parameter"]))
    emit(Report("sweep", SWEEP_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# explosion
# ---------------------------------------------------------------------------

EXPLOSION_COLUMNS = ["block_size", "closed_form", "mc_mean", "mc_stderr", "mc_z", "empirical_mean"]


def empirical_unique(data: TraceFile, n_tokens: int) -> Optional[float]:
    if n_tokens > data.header.block_size:
        return None
    cfg = data.pool_config()
    sizes = [len(unique_experts(vanilla_route(RouterBlock(block.logits[:n_tokens]), cfg))) for block in data.blocks]
    return float(np.mean(sizes))


@app.command("explosion")
def cmd_explosion(
    experts: Annotated[Optional[int], typer.Option("--experts")] = None,
    top_k: Annotated[Optional[int], typer.Option("--top-k")] = None,
    blocks: Annotated[Optional[str], typer.Option("--blocks", help="Comma-separated block sizes.")] = None,
    trials: Annotated[Optional[int], typer.Option("--trials")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    trace: Annotated[Optional[Path], typer.Option("--trace", "-t", help="Adds the empirical column.")] = None,
    workers: Annotated[Optional[int], typer.Option("--workers")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """Unique activated experts against block size: closed form, Monte Carlo, trace."""
    settings = load_settings()
    cfg_file = load_run_config(config)
    data = read_trace(trace) if trace is not None else None
    M = pick(experts, cfg_file, "experts", data.header.experts_total if data else 256)
    K = pick(top_k, cfg_file, "top_k", data.header.top_k if data else 8)
    validate_config(PoolConfig(experts_total=M, top_k=K))
    sizes = pick(parse_list(blocks, int), cfg_file, "blocks", [1, 2, 4, 8, 16, 32, 64])
    n_trials = pick(trials, cfg_file, "trials", 100_000)
    base_seed = pick(seed, cfg_file, "seed", 0)
    n_workers = pick(workers, cfg_file, "workers", settings.workers)

    rows = []
    for N in sorted(sizes):
        closed = expected_unique_experts(M, K, N)
        mean, stderr = mc_unique_experts(M, K, N, n_trials, base_seed + N, workers=n_workers)
        rows.append(
            {
                "block_size": N,
                "closed_form": closed,
                "mc_mean": mean,
                "mc_stderr": stderr,
                "mc_z": abs(mean - closed) / stderr if stderr > 0 else 0.0,
                "empirical_mean": empirical_unique(data, N) if data is not None else None,
            }
        )
    emit(Report("explosion", EXPLOSION_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# oracle-gap
# ---------------------------------------------------------------------------

ORACLE_COLUMNS = [
    "instance",
    "vote_size",
    "seq_k",
    "seq_size",
    "loss_vote",
    "loss_seq",
    "oracle_loss_vote_size",
    "oracle_loss_seq_size",
    "gap_vote",
    "gap_seq",
    "oracle_ok",
    "additive_mass",
]


def matched_seq_k(block: RouterBlock, cfg: PoolConfig, size: int) -> tuple[int, Coreset]:
    """DES-Seq budget whose coreset size is closest to ``size`` (smaller k on ties)."""
    best = None
    for k in range(1, cfg.top_k + 1):
        coreset = des_seq_coreset(block, cfg, k)
        key = (abs(len(coreset) - size), k)
        if best is None or key < best[0]:
            best = (key, k, coreset)
    return best[1], best[2]


def oracle_gap_row(index: int, block: RouterBlock, cfg: PoolConfig, beta: float, bank: ExpertBank) -> dict[str, Any]:
    vote, votes = des_vote_coreset(block, cfg, beta)
    seq_k, seq = matched_seq_k(block, cfg, len(vote))

    def losses_at(size: int, strategy: Coreset) -> tuple[float, float]:
        subsets = np.array(list(combinations(range(cfg.experts_total), size)), dtype=np.int64)
        all_losses = reconstruction_losses(block, cfg, bank, subsets)
        own = reconstruction_losses(block, cfg, bank, np.array([strategy.members], dtype=np.int64))[0]
        return float(own), float(all_losses.min())

    loss_vote, oracle_vote = losses_at(len(vote), vote)
    loss_seq, oracle_seq = losses_at(len(seq), seq)
    additive = exhaustive_additive_coreset(votes, len(vote))
    exact = retained_vote_mass(votes, vote) == retained_vote_mass(votes, additive)
    return {
        "instance": index,
        "vote_size": len(vote),
        "seq_k": seq_k,
        "seq_size": len(seq),
        "loss_vote": loss_vote,
        "loss_seq": loss_seq,
        "oracle_loss_vote_size": oracle_vote,
        "oracle_loss_seq_size": oracle_seq,
        "gap_vote": loss_vote - oracle_vote,
        "gap_seq": loss_seq - oracle_seq,
        "oracle_ok": oracle_vote <= loss_vote + ORACLE_TOLERANCE and oracle_seq <= loss_seq + ORACLE_TOLERANCE,
        "additive_mass": "exact" if exact else "mismatch",
    }


@app.command("oracle-gap")
def cmd_oracle_gap(
    instances: Annotated[Optional[int], typer.Option("--instances")] = None,
    experts: Annotated[Optional[int], typer.Option("--experts")] = None,
    top_k: Annotated[Optional[int], typer.Option("--top-k")] = None,
    block: Annotated[Optional[int], typer.Option("--block")] = None,
    beta: Annotated[Optional[float], typer.Option("--beta")] = None,
    rho: Annotated[Optional[float], typer.Option("--rho")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    bank_seed: Annotated[Optional[int], typer.Option("--bank-seed")] = None,
    hidden_dim: Annotated[Optional[int], typer.Option("--hidden-dim")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """DES-Vote and DES-Seq losses against the exhaustive reconstruction oracle."""
    cfg_file = load_run_config(config)
    M = pick(experts, cfg_file, "experts", 8)
    N = pick(block, cfg_file, "block", 4)
    if M > MAX_RECONSTRUCTION_EXPERTS or N > MAX_RECONSTRUCTION_TOKENS:
        raise GuardError(f"oracle-gap needs --experts <= {MAX_RECONSTRUCTION_EXPERTS} and --block <= {MAX_RECONSTRUCTION_TOKENS}")
    cfg = validate_config(
        PoolConfig(
            experts_total=M,
            top_k=pick(top_k, cfg_file, "top_k", 2),
            hidden_dim=pick(hidden_dim, cfg_file, "hidden_dim", 16),
        )
    )
    count = pick(instances, cfg_file, "instances", 200)
    vote_beta = pick(beta, cfg_file, "beta", 0.5)
    params = SynthParams(model=SynthModel.SHARED_BIAS, rho=pick(rho, cfg_file, "rho", 0.5))
    data = gen_trace(cfg, params, layers=1, steps=count, N=N, seed=pick(seed, cfg_file, "seed", 0))
    bank = ExpertBank.build(cfg, N, pick(bank_seed, cfg_file, "bank_seed", 0))

    rows = [oracle_gap_row(i, blk, cfg, vote_beta, bank) for i, blk in enumerate(data.blocks)]
    summary = mean_row(rows, ORACLE_COLUMNS, instance="mean")
    summary["oracle_ok"] = all(r["oracle_ok"] for r in rows)
    summary["additive_mass"] = "exact" if all(r["additive_mass"] == "exact" for r in rows) else "mismatch"
    rows.append(summary)
    emit(Report("oracle-gap", ORACLE_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# hit-rates
# ---------------------------------------------------------------------------

HIT_COLUMNS = ["method", "cosine_vs_vanilla", "rank", "rate"]


@app.command("hit-rates")
def cmd_hit_rates(
    trace: TraceArg,
    method: Annotated[Optional[list[str]], typer.Option("--method", "-m", help="Repeatable method spec.")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """Hit-rate cosine against vanilla and activation-frequency curves."""
    cfg_file = load_run_config(config)
    data = read_trace(trace)
    cfg = data.pool_config()
    specs = [parse_method(m) for m in (method or cfg_file.method or ["des-vote:0.15", "des-seq:2"])]
    M, K = cfg.experts_total, cfg.top_k

    vanilla_hits = hit_rate_vector((vanilla_route(blk, cfg) for blk in data.blocks), M, K)
    rows = []
    for spec in [MethodSpec(MethodName.VANILLA), *specs]:
        hits = hit_rate_vector((apply_method(blk, cfg, spec).assignment for blk in data.blocks), M, K)
        cosine = hit_rate_cosine(vanilla_hits, hits)
        for rank, rate in enumerate(activation_frequency_curve(hits)):
            rows.append({"method": spec.label, "cosine_vs_vanilla": cosine, "rank": rank, "rate": float(rate)})
    emit(Report("hit-rates", HIT_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# block-sweep
# ---------------------------------------------------------------------------

BLOCK_COLUMNS = ["block_size", "vanilla_unique", "vote_unique", "vote_coreset_size", "vote_recall", "closed_form"]


@app.command("block-sweep")
def cmd_block_sweep(
    experts: Annotated[Optional[int], typer.Option("--experts")] = None,
    top_k: Annotated[Optional[int], typer.Option("--top-k")] = None,
    blocks: Annotated[Optional[str], typer.Option("--blocks")] = None,
    beta: Annotated[Optional[float], typer.Option("--beta")] = None,
    rho: Annotated[Optional[float], typer.Option("--rho")] = None,
    steps: Annotated[Optional[int], typer.Option("--steps")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed")] = None,
    config: ConfigOpt = None,
    output: OutputOpt = None,
    fmt: FormatOpt = OutputFormat.CSV,
) -> None:
    """Unique experts of vanilla vs DES-Vote as the block grows."""
    cfg_file = load_run_config(config)
    cfg = validate_config(
        PoolConfig(experts_total=pick(experts, cfg_file, "experts", 256), top_k=pick(top_k, cfg_file, "top_k", 8))
    )
    vote_beta = pick(beta, cfg_file, "beta", 0.15)
    params = SynthParams(model=SynthModel.SHARED_BIAS, rho=pick(rho, cfg_file, "rho", 0.5))
    n_steps = pick(steps, cfg_file, "steps", 20)
    base_seed = pick(seed, cfg_file, "seed", 0)

    rows = []
    for N in sorted(pick(parse_list(blocks, int), cfg_file, "blocks", [8, 16, 32, 64])):
        data = gen_trace(cfg, params, layers=1, steps=n_steps, N=N, seed=base_seed + N)
        van, vote, size, recall = [], [], [], []
        for blk in data.blocks:
            vanilla = vanilla_route(blk, cfg)
            coreset, _ = des_vote_coreset(blk, cfg, vote_beta)
            van.append(len(unique_experts(vanilla)))
            vote.append(len(unique_experts(constrained_route(blk, cfg, coreset))))
            size.append(len(coreset))
            recall.append(topk_recall(vanilla, coreset, cfg.top_k))
        rows.append(
            {
                "block_size": N,
                "vanilla_unique": float(np.mean(van)),
                "vote_unique": float(np.mean(vote)),
                "vote_coreset_size": float(np.mean(size)),
                "vote_recall": float(np.mean(recall)),
                "closed_form": expected_unique_experts(cfg.experts_total, cfg.top_k, N),
            }
        )
    emit(Report("block-sweep", BLOCK_COLUMNS, rows), fmt, output)


# ---------------------------------------------------------------------------
# serve / version
# ---------------------------------------------------------------------------


@app.command("serve")
def cmd_serve() -> None:
    """Run the tool server on stdio for one client session."""
    from dessim.server import mcp

    mcp.run(transport="stdio")


@app.command("version")
def cmd_version() -> None:
    typer.echo(__version__)


def main(argv: Optional[list[str]] = None) -> int:
    command = typer.main.get_command(app)
    try:
        result = command.main(args=argv, prog_name="dessim", standalone_mode=False)
    except click.exceptions.Abort:
        typer.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except DessimError as e:
        typer.echo(f"Error: {e}", err=True)
        return e.exit_code
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"]) or e.title
        typer.echo(f"Error: {where}: {first['msg']}", err=True)
        return 1
    except OSError as e:
        typer.echo(f"Error: {e}", err=True)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    raise SystemExit(main())
