"""
Domain types, configuration and seeded randomness shared by every dessim module.

Expert indices are 0-based everywhere. All reference-path arithmetic is float64.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class DessimError(Exception):
    """Base error. ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(DessimError):
    """A configuration or parameter invariant does not hold."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        message = f"invariant violated: {invariant}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ShapeError(DessimError):
    """Array dimensions disagree with the pool or the bank."""


class GuardError(DessimError):
    """An exhaustive oracle was asked for an instance above its size guard."""


class ConsistencyError(DessimError):
    """Two computations that must agree did not. Always a bug."""

    exit_code = 2


# ---------------------------------------------------------------------------
# Settings (.env / environment)
# ---------------------------------------------------------------------------


class Settings(BaseModel):
    """Process-level defaults resolved from the environment."""

    model_config = ConfigDict(frozen=True)

    latency_a: float = 0.1
    latency_b: float = 1.0
    bytes_per_expert: float = 0.98e9 / 84
    log_level: str = "INFO"
    workers: int = 1


def load_settings(env_file: str | os.PathLike | None = None) -> Settings:
    """Read DESSIM_* variables, loading a .env file first if one exists."""
    load_dotenv(env_file)
    defaults = Settings()
    return Settings(
        latency_a=float(os.getenv("DESSIM_LATENCY_A", defaults.latency_a)),
        latency_b=float(os.getenv("DESSIM_LATENCY_B", defaults.latency_b)),
        bytes_per_expert=float(os.getenv("DESSIM_BYTES_PER_EXPERT", defaults.bytes_per_expert)),
        log_level=os.getenv("DESSIM_LOG_LEVEL", defaults.log_level).upper(),
        workers=int(os.getenv("DESSIM_WORKERS", defaults.workers)),
    )


# ---------------------------------------------------------------------------
# Pool configuration
# ---------------------------------------------------------------------------


class GateActivation(str, Enum):
    SOFTMAX = "softmax"
    SIGMOID = "sigmoid"


class PoolConfig(BaseModel):
    """Static description of one MoE layer's expert pool."""

    model_config = ConfigDict(frozen=True)

    experts_total: int
    top_k: int
    gate_activation: GateActivation = GateActivation.SOFTMAX
    bytes_per_expert: float = 0.98e9 / 84
    hidden_dim: int = 32


def validate_config(cfg: PoolConfig) -> PoolConfig:
    """Return ``cfg`` unchanged, or raise ConfigError naming the first broken invariant."""
    if cfg.top_k < 1:
        raise ConfigError("top_k >= 1", f"top_k={cfg.top_k}")
    if cfg.top_k > cfg.experts_total:
        raise ConfigError("top_k <= experts_total", f"K={cfg.top_k} > M={cfg.experts_total}")
    if not cfg.bytes_per_expert > 0:
        raise ConfigError("bytes_per_expert > 0", f"bytes_per_expert={cfg.bytes_per_expert}")
    if cfg.hidden_dim < 1:
        raise ConfigError("hidden_dim >= 1", f"hidden_dim={cfg.hidden_dim}")
    return cfg


def load_pool_config(path: str | os.PathLike) -> PoolConfig:
    with open(path, "r", encoding="utf-8") as f:
        return validate_config(PoolConfig.model_validate_json(f.read()))


def dump_pool_config(cfg: PoolConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Blocks, coresets, assignments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RouterBlock:
    """Router logits of one decoding block for one MoE layer (N x M)."""

    logits: np.ndarray

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise ShapeError(f"router logits must be a non-empty N x M matrix, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise ConfigError("logits finite")
        logits.setflags(write=False)
        object.__setattr__(self, "logits", logits)

    @property
    def block_size(self) -> int:
        return self.logits.shape[0]

    @property
    def experts_total(self) -> int:
        return self.logits.shape[1]

    def check(self, cfg: PoolConfig) -> "RouterBlock":
        if self.experts_total != cfg.experts_total:
            raise ShapeError(
                f"block has {self.experts_total} expert columns, pool has {cfg.experts_total}"
            )
        return self


@dataclass(frozen=True)
class Coreset:
    """Strictly increasing expert indices serving a whole block."""

    members: tuple[int, ...]

    def __post_init__(self):
        members = tuple(int(i) for i in self.members)
        if any(b <= a for a, b in zip(members, members[1:])):
            raise ConfigError("coreset strictly increasing", f"members={members}")
        if members and members[0] < 0:
            raise ConfigError("coreset indices >= 0")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, indices: Iterable[int]) -> "Coreset":
        return cls(tuple(sorted({int(i) for i in indices})))

    def check(self, experts_total: int) -> "Coreset":
        if self.members and self.members[-1] >= experts_total:
            raise ConfigError("coreset indices < experts_total", f"max={self.members[-1]}")
        return self

    def mask(self, experts_total: int) -> np.ndarray:
        m = np.zeros(experts_total, dtype=bool)
        m[list(self.members)] = True
        return m

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, index: object) -> bool:
        return index in self.members

    def issubset(self, other: "Coreset") -> bool:
        return set(self.members) <= set(other.members)


@dataclass(frozen=True)
class RoutingAssignment:
    """Per-token selected experts (rank order) and their normalized gate weights."""

    selected: tuple[tuple[int, ...], ...]
    gates: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.selected) != len(self.gates):
            raise ShapeError("selected and gates must have one entry per token")
        for sel, g in zip(self.selected, self.gates):
            if len(sel) != len(g):
                raise ShapeError("each token needs one gate per selected expert")
            if len(set(sel)) != len(sel):
                raise ConfigError("selected indices distinct", f"selected={sel}")

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[int], Sequence[float]]]) -> "RoutingAssignment":
        return cls(
            selected=tuple(tuple(int(i) for i in sel) for sel, _ in rows),
            gates=tuple(tuple(float(w) for w in g) for _, g in rows),
        )

    @property
    def n_tokens(self) -> int:
        return len(self.selected)

    def selection_count(self) -> int:
        return sum(len(sel) for sel in self.selected)

    def counts(self, experts_total: int) -> np.ndarray:
        """Tokens routed to each expert (cnt_i)."""
        cnt = np.zeros(experts_total, dtype=np.int64)
        for sel in self.selected:
            cnt[list(sel)] += 1
        return cnt


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded generator: numpy PCG64, whose stream is identical on every platform.

    Child streams come from ``SeedSequence.spawn`` so work split across blocks or
    shards draws the same numbers however it is scheduled.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def seed(self) -> int:
        return int(self._seq.entropy)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, n: int) -> list["Rng"]:
        return [Rng(child) for child in self._seq.spawn(n)]

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def dirichlet(self, alpha: np.ndarray, size=None) -> np.ndarray:
        return self._gen.dirichlet(alpha, size=size)

    def hypergeometric(self, ngood, nbad, nsample) -> np.ndarray:
        return self._gen.hypergeometric(ngood, nbad, nsample)
