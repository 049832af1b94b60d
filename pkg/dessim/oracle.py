"""
Exhaustive and Monte Carlo references for testing the selection strategies.

The enumeration guards are hard errors: an oracle is exact or it refuses.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations

import numpy as np
from mcp.server.fastmcp.utilities.logging import get_logger

from dessim.core import ConfigError, Coreset, GuardError, PoolConfig, Rng, RouterBlock
from dessim.des import VoteVector
from dessim.gating import ExpertBank, activate, topk_indices
from dessim.metrics import VANISHING_NORM2

logger = get_logger(__name__)

MAX_ADDITIVE_EXPERTS = 20
MAX_RECONSTRUCTION_EXPERTS = 12
MAX_RECONSTRUCTION_TOKENS = 8
MC_SHARD_TRIALS = 10_000

# candidates within this of the vectorised maximum are re-summed exactly
_NEAR_TIE = 1e-9


def _subsets(M: int, m_core: int) -> np.ndarray:
    return np.array(list(combinations(range(M), m_core)), dtype=np.int64).reshape(-1, m_core)


def exhaustive_additive_coreset(votes: VoteVector, m_core: int) -> Coreset:
    """Size-m_core subset with the largest vote sum; lowest lexicographic among ties."""
    M = len(votes)
    if M > MAX_ADDITIVE_EXPERTS:
        raise GuardError(f"additive oracle enumerates at most {MAX_ADDITIVE_EXPERTS} experts, got {M}")
    if not 1 <= m_core <= M:
        raise ConfigError("1 <= m_core <= M", f"m_core={m_core}, M={M}")
    subsets = _subsets(M, m_core)
    approx = votes.votes[subsets].sum(axis=1)
    near = np.flatnonzero(approx >= approx.max() - _NEAR_TIE)
    best, best_mass = None, -math.inf
    for s in near:  # ascending, i.e. lexicographic order
        mass = math.fsum(float(v) for v in votes.votes[subsets[s]])
        if mass > best_mass:
            best, best_mass = s, mass
    return Coreset(tuple(int(i) for i in subsets[best]))


def reconstruction_losses(
    block: RouterBlock,
    cfg: PoolConfig,
    bank: ExpertBank,
    subsets: np.ndarray,
) -> np.ndarray:
    """Mean relative residual of constrained routing for every row of ``subsets`` at once."""
    probs = activate(block, cfg).probs  # (N, M)
    outputs = bank.expert_outputs()  # (N, M, D)
    N, M = probs.shape
    k = min(cfg.top_k, subsets.shape[1])

    van_idx = np.stack([topk_indices(row, cfg.top_k) for row in probs])  # (N, K)
    van_w = np.take_along_axis(probs, van_idx, axis=1)
    van_w = van_w / van_w.sum(axis=1, keepdims=True)
    reference = np.einsum("nk,nkd->nd", van_w, np.take_along_axis(outputs, van_idx[:, :, None], axis=1))

    allowed = np.zeros((len(subsets), M), dtype=bool)
    allowed[np.arange(len(subsets))[:, None], subsets] = True
    masked = np.where(allowed[:, None, :], probs[None, :, :], -np.inf)  # (S, N, M)
    idx = np.argsort(-masked, axis=2, kind="stable")[:, :, :k]
    w = np.take_along_axis(masked, idx, axis=2)
    w = w / w.sum(axis=2, keepdims=True)
    picked = outputs[np.arange(N)[None, :, None], idx]  # (S, N, k, D)
    y = np.einsum("snk,snkd->snd", w, picked)

    ref_norm2 = np.einsum("nd,nd->n", reference, reference)
    defined = ref_norm2 > VANISHING_NORM2
    diff = y - reference[None]
    res = np.einsum("snd,snd->sn", diff, diff)[:, defined] / ref_norm2[defined]
    return res.mean(axis=1) if defined.any() else np.full(len(subsets), np.nan)


def exhaustive_reconstruction_coreset(
    block: RouterBlock,
    cfg: PoolConfig,
    bank: ExpertBank,
    m_core: int,
) -> tuple[Coreset, float]:
    """Size-m_core coreset with the lowest reconstruction loss, and that loss."""
    M, N = cfg.experts_total, block.block_size
    if M > MAX_RECONSTRUCTION_EXPERTS or N > MAX_RECONSTRUCTION_TOKENS:
        raise GuardError(
            f"reconstruction oracle needs M <= {MAX_RECONSTRUCTION_EXPERTS} and "
            f"N <= {MAX_RECONSTRUCTION_TOKENS}, got M={M}, N={N}"
        )
    if not 1 <= m_core <= M:
        raise ConfigError("1 <= m_core <= M", f"m_core={m_core}, M={M}")
    bank.check(cfg)
    subsets = _subsets(M, m_core)
    losses = reconstruction_losses(block, cfg, bank, subsets)
    best = int(np.argmin(losses))
    return Coreset(tuple(int(i) for i in subsets[best])), float(losses[best])


def _shard_unique_hypergeometric(M: int, K: int, N: int, trials: int, rng: Rng) -> np.ndarray:
    # new experts contributed by a uniform K-subset, given u already active
    u = np.zeros(trials, dtype=np.int64)
    for _ in range(N):
        u += rng.hypergeometric(M - u, u, K)
    return u


def _shard_unique_subsets(M: int, K: int, N: int, trials: int, rng: Rng) -> np.ndarray:
    u = np.empty(trials, dtype=np.int64)
    chunk = max(1, 2_000_000 // (N * M))
    for start in range(0, trials, chunk):
        c = min(chunk, trials - start)
        keys = rng.random((c, N, M))
        sel = np.argpartition(keys, K - 1, axis=2)[:, :, :K]
        hit = np.zeros((c, M), dtype=bool)
        hit[np.arange(c)[:, None, None], sel] = True
        u[start : start + c] = hit.sum(axis=1)
    return u


def mc_unique_experts(
    M: int,
    K: int,
    N: int,
    trials: int,
    seed: int,
    method: str = "hypergeometric",
    workers: int = 1,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the union size of N uniform K-subsets."""
    if trials < 1:
        raise ConfigError("trials >= 1", f"trials={trials}")
    if not 1 <= K <= M or N < 1:
        raise ConfigError("1 <= K <= M and N >= 1", f"M={M}, K={K}, N={N}")
    shard = {"hypergeometric": _shard_unique_hypergeometric, "subsets": _shard_unique_subsets}.get(method)
    if shard is None:
        raise ConfigError("method in {hypergeometric, subsets}", f"method={method}")

    sizes = [MC_SHARD_TRIALS] * (trials // MC_SHARD_TRIALS)
    if trials % MC_SHARD_TRIALS:
        sizes.append(trials % MC_SHARD_TRIALS)
    rngs = Rng(seed).spawn(len(sizes))

    def run(i: int) -> np.ndarray:
        return shard(M, K, N, sizes[i], rngs[i])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]

    u = np.concatenate(parts).astype(np.float64)
    mean = float(u.mean())
    stderr = float(u.std(ddof=1) / math.sqrt(len(u))) if len(u) > 1 else 0.0
    logger.debug("mc unique experts M=%d K=%d N=%d: %.4f +- %.4f", M, K, N, mean, stderr)
    return mean, stderr
