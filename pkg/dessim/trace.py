"""
Router traces: synthetic generation and the on-disk formats.

Binary (.moet), all little-endian:

    b"MOET"  u16 version
    u32 experts_total, u32 top_k, u32 layers, u32 block_size, u32 steps, u64 seed
    u32 n, n bytes of UTF-8 JSON generator metadata (sorted keys, compact)
    per record, ordered by (step, layer):
        u32 step, u32 layer, block_size * experts_total float32 logits, row-major

JSON-Lines (.jsonl): a header object on the first line, then one
``{"step", "layer", "logits"}`` object per record in the same order.

Logits are held as float32 values (widened to float64 in memory), so both
formats round-trip byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from mcp.server.fastmcp.utilities.logging import get_logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from dessim.core import ConfigError, DessimError, PoolConfig, Rng, RouterBlock, validate_config

logger = get_logger(__name__)

MAGIC = b"MOET"
FORMAT_VERSION = 1
JSONL_FORMAT = "moet-jsonl"

_HEADER = struct.Struct("<IIIIIQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_RECORD_KEY = struct.Struct("<II")
_LOG_FLOOR = 1e-30


class TraceError(DessimError):
    """Unreadable trace. ``code`` is one of bad_magic, version_mismatch,
    truncated, shape_mismatch, malformed."""

    def __init__(self, code: str, message: str, record: int | None = None):
        self.code = code
        self.record = record
        where = f" at record {record}" if record is not None else ""
        super().__init__(f"{code}{where}: {message}")


class SynthModel(str, Enum):
    IID_GAUSSIAN = "iid_gaussian"
    DIRICHLET = "dirichlet"
    SHARED_BIAS = "shared_bias"


class SynthParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: SynthModel = SynthModel.SHARED_BIAS
    rho: float = 0.0
    temperature: float = 1.0
    dirichlet_alpha: float = 1.0


class TraceHeader(BaseModel):
    model_config = ConfigDict(frozen=True)

    experts_total: int
    top_k: int
    layers: int
    block_size: int
    steps: int
    seed: int = 0
    generator: dict[str, Any] = Field(default_factory=dict)


@dataclass(frozen=True)
class TraceFile:
    header: TraceHeader
    blocks: tuple[RouterBlock, ...]  # (step, layer) order

    def block(self, step: int, layer: int) -> RouterBlock:
        return self.blocks[step * self.header.layers + layer]

    def pool_config(self, **overrides) -> PoolConfig:
        return validate_config(
            PoolConfig(experts_total=self.header.experts_total, top_k=self.header.top_k, **overrides)
        )


def trace_blocks(trace: TraceFile) -> Iterator[tuple[int, int, RouterBlock]]:
    for n, block in enumerate(trace.blocks):
        yield n // trace.header.layers, n % trace.header.layers, block


def check_synth(params: SynthParams) -> SynthParams:
    if not 0.0 <= params.rho <= 1.0:
        raise ConfigError("rho in [0, 1]", f"rho={params.rho}")
    if not params.temperature > 0:
        raise ConfigError("temperature > 0", f"temperature={params.temperature}")
    if not params.dirichlet_alpha > 0:
        raise ConfigError("dirichlet_alpha > 0", f"dirichlet_alpha={params.dirichlet_alpha}")
    return params


def synth_block(cfg: PoolConfig, params: SynthParams, n_tokens: int, rng: Rng) -> np.ndarray:
    M, rho = cfg.experts_total, params.rho
    if params.model is SynthModel.IID_GAUSSIAN:
        raw = rng.normal((n_tokens, M))
    elif params.model is SynthModel.SHARED_BIAS:
        bias = rng.normal(M)
        noise = rng.normal((n_tokens, M))
        raw = rho * bias[None, :] + (1.0 - rho) * noise
    else:
        alpha = np.full(M, params.dirichlet_alpha)
        base = np.log(np.maximum(rng.dirichlet(alpha), _LOG_FLOOR))
        tokens = np.log(np.maximum(rng.dirichlet(alpha, size=n_tokens), _LOG_FLOOR))
        raw = rho * base[None, :] + (1.0 - rho) * tokens
    return (params.temperature * raw).astype("<f4").astype(np.float64)


def gen_trace(
    cfg: PoolConfig,
    params: SynthParams,
    layers: int,
    steps: int,
    N: int,
    seed: int,
) -> TraceFile:
    validate_config(cfg)
    check_synth(params)
    for name, value in (("layers", layers), ("steps", steps), ("block_size", N)):
        if value < 1:
            raise ConfigError(f"{name} >= 1", f"{name}={value}")
    if not 0 <= seed < 2**64:
        raise ConfigError("0 <= seed < 2**64", f"seed={seed}")

    rngs = Rng(seed).spawn(layers * steps)
    blocks = tuple(RouterBlock(synth_block(cfg, params, N, rng)) for rng in rngs)
    header = TraceHeader(
        experts_total=cfg.experts_total,
        top_k=cfg.top_k,
        layers=layers,
        block_size=N,
        steps=steps,
        seed=seed,
        generator=params.model_dump(mode="json"),
    )
    logger.info("generated %d blocks (%s, rho=%.3g)", len(blocks), params.model.value, params.rho)
    return TraceFile(header=header, blocks=blocks)


# ---------------------------------------------------------------------------
# Binary
# ---------------------------------------------------------------------------


def _metadata_bytes(header: TraceHeader) -> bytes:
    return json.dumps(header.generator, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_binary(trace: TraceFile) -> bytes:
    h = trace.header
    meta = _metadata_bytes(h)
    parts = [
        MAGIC,
        _U16.pack(FORMAT_VERSION),
        _HEADER.pack(h.experts_total, h.top_k, h.layers, h.block_size, h.steps, h.seed),
        _U32.pack(len(meta)),
        meta,
    ]
    for step, layer, block in trace_blocks(trace):
        parts.append(_RECORD_KEY.pack(step, layer))
        parts.append(block.logits.astype("<f4").tobytes())
    return b"".join(parts)


def decode_binary(data: bytes) -> TraceFile:
    if len(data) < len(MAGIC):
        raise TraceError("truncated", f"{len(data)} bytes, shorter than the magic")
    if data[:4] != MAGIC:
        raise TraceError("bad_magic", f"expected {MAGIC!r}, found {data[:4]!r}")
    pos = 4
    if len(data) < pos + _U16.size + _HEADER.size + _U32.size:
        raise TraceError("truncated", "header is incomplete")
    (version,) = _U16.unpack_from(data, pos)
    if version != FORMAT_VERSION:
        raise TraceError("version_mismatch", f"file version {version}, reader version {FORMAT_VERSION}")
    pos += _U16.size
    M, K, layers, N, steps, seed = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    (meta_len,) = _U32.unpack_from(data, pos)
    pos += _U32.size
    if len(data) < pos + meta_len:
        raise TraceError("truncated", "generator metadata is incomplete")
    try:
        generator = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TraceError("malformed", f"generator metadata: {e}")
    pos += meta_len
    try:
        header = TraceHeader(
            experts_total=M, top_k=K, layers=layers, block_size=N, steps=steps, seed=seed, generator=generator
        )
    except ValidationError as e:
        raise TraceError("malformed", f"header: {e.error_count()} invalid field(s)")

    body = N * M * 4
    stride = _RECORD_KEY.size + body
    records = layers * steps
    declared = pos + records * stride
    if len(data) > declared:
        raise TraceError("shape_mismatch", f"{len(data) - declared} bytes beyond {records} records of {N}x{M}")
    if len(data) < declared:
        first_short = (len(data) - pos) // stride
        raise TraceError("truncated", f"expected {records} records", first_short)

    blocks = []
    for record in range(records):
        step, layer = _RECORD_KEY.unpack_from(data, pos)
        if (step, layer) != divmod(record, layers):
            raise TraceError("malformed", f"record key ({step}, {layer}) out of order", record)
        pos += _RECORD_KEY.size
        logits = np.frombuffer(data, dtype="<f4", count=N * M, offset=pos).reshape(N, M)
        blocks.append(_block_or_error(logits.astype(np.float64), record))
        pos += body
    return TraceFile(header=header, blocks=tuple(blocks))


def _block_or_error(logits: np.ndarray, record: int) -> RouterBlock:
    try:
        return RouterBlock(logits)
    except DessimError as e:
        raise TraceError("malformed", str(e), record)


# ---------------------------------------------------------------------------
# JSON-Lines
# ---------------------------------------------------------------------------


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_jsonl(trace: TraceFile) -> str:
    h = trace.header
    head = {"format": JSONL_FORMAT, "version": FORMAT_VERSION, **h.model_dump(mode="json")}
    lines = [_dumps(head)]
    for step, layer, block in trace_blocks(trace):
        lines.append(_dumps({"step": step, "layer": layer, "logits": block.logits.tolist()}))
    return "\n".join(lines) + "\n"


def decode_jsonl(text: str) -> TraceFile:
    lines = text.splitlines()
    if not lines:
        raise TraceError("truncated", "empty file")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise TraceError("malformed", f"header: {e}")
    if not isinstance(head, dict) or head.get("format") != JSONL_FORMAT:
        raise TraceError("bad_magic", f"first line is not a {JSONL_FORMAT} header")
    if head.get("version") != FORMAT_VERSION:
        raise TraceError("version_mismatch", f"file version {head.get('version')}, reader version {FORMAT_VERSION}")
    try:
        header = TraceHeader.model_validate({k: v for k, v in head.items() if k not in ("format", "version")})
    except ValidationError as e:
        raise TraceError("malformed", f"header: {e.error_count()} invalid field(s)")

    expected = header.layers * header.steps
    body = lines[1:]
    blocks = []
    for record in range(expected):
        if record >= len(body):
            raise TraceError("truncated", f"expected {expected} records, found {len(body)}", record)
        try:
            obj = json.loads(body[record])
        except json.JSONDecodeError as e:
            raise TraceError("truncated" if record == len(body) - 1 else "malformed", str(e), record)
        if not isinstance(obj, dict):
            raise TraceError("malformed", f"record is a {type(obj).__name__}, not an object", record)
        if (obj.get("step"), obj.get("layer")) != divmod(record, header.layers):
            raise TraceError("malformed", "record key out of order", record)
        rows = obj.get("logits")
        if not isinstance(rows, list) or len(rows) != header.block_size:
            raise TraceError("shape_mismatch", f"expected {header.block_size} rows", record)
        for row in rows:
            if not isinstance(row, list) or len(row) != header.experts_total:
                width = len(row) if isinstance(row, list) else "non-list"
                raise TraceError("shape_mismatch", f"row width {width}, header M={header.experts_total}", record)
        try:
            logits = np.array(rows, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise TraceError("malformed", f"logits: {e}", record)
        blocks.append(_block_or_error(logits, record))
    if len(body) > expected:
        raise TraceError("shape_mismatch", f"{len(body) - expected} records beyond the header's count")
    return TraceFile(header=header, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "jsonl" if path.suffix in (".jsonl", ".json") else "binary"


def write_trace(trace: TraceFile, path: str | os.PathLike, fmt: str | None = None) -> None:
    path = Path(path)
    if _format_for(path, fmt) == "jsonl":
        path.write_bytes(encode_jsonl(trace).encode("utf-8"))
    else:
        path.write_bytes(encode_binary(trace))
    logger.debug("wrote %s", path)


def read_trace(path: str | os.PathLike, fmt: str | None = None) -> TraceFile:
    path = Path(path)
    data = path.read_bytes()
    if _format_for(path, fmt) == "jsonl":
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TraceError("malformed", f"not UTF-8 at byte {e.start}")
        return decode_jsonl(text)
    return decode_binary(data)
