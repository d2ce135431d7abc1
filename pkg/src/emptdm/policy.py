"""Query scoring and selection, plus the baseline selectors.

All ensemble statistics sum over every ordered pair (i, j) of samples,
including i == j.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .domain import GridSpec
from .posterior import PosteriorEnsemble
from .reward import RewardModel, reward_predict


@dataclass(frozen=True)
class PolicyConfig:
    sigma_x: float = 1.0
    P: int = 16
    alpha_mode: str = "linear-remaining"
    amplification: float = 1.0
    normalization: str = "minmax"
    tie_break: str = "lowest-index"

    def __post_init__(self):
        if self.sigma_x <= 0:
            raise ValueError("sigma_x must be positive")
        if self.amplification < 1:
            raise ValueError("amplification must be >= 1")
        if self.alpha_mode not in ("linear-remaining", "amplified"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.normalization not in ("none", "minmax"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True, eq=False)
class ScoreBreakdown:
    """Per-candidate score families for one query step (arrays of length N)."""
    expl: np.ndarray
    likeli: np.ndarray
    reward_sum: np.ndarray
    exploit: np.ndarray
    combined: np.ndarray
    alpha: float

    def record(self, q: int) -> dict:
        return {"expl": float(self.expl[q]), "likeli": float(self.likeli[q]),
                "reward_sum": float(self.reward_sum[q]), "exploit": float(self.exploit[q]),
                "combined": float(self.combined[q])}

    def rows(self) -> list[dict]:
        return [{"index": q, **self.record(q)} for q in range(len(self.combined))]


def _pair_sqdist(ens: PosteriorEnsemble, grid: GridSpec):
    """Squared patch distances for every sample pair, shape (P, P, N)."""
    patches = grid.patches(ens.samples)                       # (P, N, k)
    diff = patches[:, None] - patches[None, :]
    return np.einsum("ijnk,ijnk->ijn", diff, diff)


def _check(q, grid):
    if not 0 <= q < grid.n_candidates:
        raise IndexError(f"candidate {q} outside [0, {grid.n_candidates})")


def expl_scores(ens: PosteriorEnsemble, grid: GridSpec, sigma_x: float = 1.0) -> np.ndarray:
    return _pair_sqdist(ens, grid).sum(axis=(0, 1)) / (2.0 * sigma_x ** 2)


def log_likeli_scores(ens: PosteriorEnsemble, grid: GridSpec, sigma_x: float = 1.0) -> np.ndarray:
    d = _pair_sqdist(ens, grid)
    return logsumexp(-d / (2.0 * sigma_x ** 2), axis=(0, 1))


def likeli_scores(ens: PosteriorEnsemble, grid: GridSpec, sigma_x: float = 1.0) -> np.ndarray:
    return np.exp(log_likeli_scores(ens, grid, sigma_x))


def reward_sums(ens: PosteriorEnsemble, grid: GridSpec, r: RewardModel) -> np.ndarray:
    return r.predict(grid.patches(ens.samples)).sum(axis=0)


def exploit_scores(ens: PosteriorEnsemble, grid: GridSpec, r: RewardModel,
                   sigma_x: float = 1.0, likeli=None) -> np.ndarray:
    if likeli is None:
        likeli = likeli_scores(ens, grid, sigma_x)
    return likeli * reward_sums(ens, grid, r)


def expl_score(ens: PosteriorEnsemble, grid: GridSpec, q: int, sigma_x: float = 1.0) -> float:
    _check(q, grid)
    return float(expl_scores(ens, grid, sigma_x)[q])


def likeli_score(ens: PosteriorEnsemble, grid: GridSpec, q: int, sigma_x: float = 1.0) -> float:
    _check(q, grid)
    return float(likeli_scores(ens, grid, sigma_x)[q])


def exploit_score(ens: PosteriorEnsemble, grid: GridSpec, q: int, r: RewardModel,
                  sigma_x: float = 1.0) -> float:
    _check(q, grid)
    patches = grid.patches(ens.samples)[:, q]
    return likeli_score(ens, grid, q, sigma_x) * sum(reward_predict(r, p) for p in patches)


def alpha(t: int, B: int, amplification: float = 1.0) -> float:
    """Exploration weight ``max(0, (aB - t) / (aB + t))`` clamped to [0, 1]."""
    if not 0 <= t <= B:
        raise ValueError(f"step {t} outside [0, {B}]")
    b_eff = amplification * B
    return float(np.clip((b_eff - t) / (b_eff + t), 0.0, 1.0))


def _minmax(v, active):
    sub = v[active]
    lo, hi = sub.min(), sub.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def combined_score(expl, likeli, reward_sum, exploit, t: int, B: int, cfg: PolicyConfig,
                   visited: Iterable[int] = ()) -> ScoreBreakdown:
    """Mix exploration and exploitation with the budget-dependent weight.

    With ``minmax`` normalisation each family is rescaled over the unvisited
    candidates before mixing.
    """
    amp = cfg.amplification if cfg.alpha_mode == "amplified" else 1.0
    a = alpha(t, B, amp)
    expl = np.asarray(expl, dtype=float)
    exploit = np.asarray(exploit, dtype=float)
    if cfg.normalization == "minmax":
        active = np.ones(len(expl), dtype=bool)
        active[list(visited)] = False
        if not active.any():
            active[:] = True
        e, x = _minmax(expl, active), _minmax(exploit, active)
    else:
        e, x = expl, exploit
    combined = a * e + (1.0 - a) * x
    return ScoreBreakdown(expl, np.asarray(likeli, float), np.asarray(reward_sum, float),
                          exploit, combined, a)


def select_query(scores, visited: Iterable[int] = ()) -> int:
    """Argmax over unvisited candidates; ties go to the lowest index."""
    combined = scores.combined if isinstance(scores, ScoreBreakdown) else np.asarray(scores, float)
    masked = np.array(combined, dtype=float)
    visited = list(visited)
    if len(set(visited)) >= len(masked):
        raise ValueError("all candidates visited")
    masked[visited] = -np.inf
    return int(np.argmax(masked))


def score_candidates(ens: PosteriorEnsemble, grid: GridSpec, r: RewardModel, t: int, B: int,
                     cfg: PolicyConfig, visited: Iterable[int] = ()) -> ScoreBreakdown:
    expl = expl_scores(ens, grid, cfg.sigma_x)
    likeli = likeli_scores(ens, grid, cfg.sigma_x)
    rsum = reward_sums(ens, grid, r)
    return combined_score(expl, likeli, rsum, likeli * rsum, t, B, cfg, visited)


# ----------------------------------------------------------------- baselines

def baseline_random(visited: Iterable[int], N: int, rng: np.random.Generator) -> int:
    free = np.setdiff1d(np.arange(N), np.fromiter(visited, dtype=int))
    if free.size == 0:
        raise ValueError("all candidates visited")
    return int(free[rng.integers(free.size)])


def baseline_greedy_adaptive(ens: PosteriorEnsemble, grid: GridSpec, r: RewardModel,
                             visited: Iterable[int], sigma_x: float = 1.0) -> int:
    """Highest exploitation score among unvisited candidates."""
    return select_query(exploit_scores(ens, grid, r, sigma_x), visited)
