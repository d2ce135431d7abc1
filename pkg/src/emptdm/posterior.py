"""Conditional reverse-diffusion sampling of the posterior ensemble."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ObservationSet
from .memory_permanent import ScoreModel
from .memory_transient import HModel, h_correct
from .schedule import ddim_step, tweedie


@dataclass(frozen=True, eq=False)
class PosteriorEnsemble:
    samples: np.ndarray   # (P, H, W)
    seed: int
    step_t: int = 0

    def __post_init__(self):
        if self.samples.ndim != 3 or len(self.samples) < 2:
            raise ValueError("an ensemble needs at least two grid samples")

    def __len__(self):
        return len(self.samples)

    def mean(self):
        return self.samples.mean(axis=0)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent generator for chain *chain* of root *seed*."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


def run_chains(s: ScoreModel, h: HModel | None, obs: ObservationSet, seed: int,
               chains) -> np.ndarray:
    """Reverse trajectories for the given chain ids, batched; returns x_0 stack."""
    sched = s.schedule
    chains = list(chains)
    rngs = [chain_rng(seed, c) for c in chains]
    shape = obs.values.shape
    x = np.stack([r.standard_normal(shape) for r in rngs])
    use_h = h is not None and not h.is_null()
    stochastic = bool(np.any(sched.sigma[1:] > 0))
    for t in range(sched.T - 1, -1, -1):
        eps = s.predict_eps(x, t)
        if use_h:
            x0_hat = tweedie(sched, x, eps, t)
            eps = eps + h_correct(h, x, x0_hat, obs, t)
        noise = None
        if stochastic and t > 0:
            noise = np.stack([r.standard_normal(shape) for r in rngs])
        x = ddim_step(sched, x, eps, t, noise)
    return x


def sample_posterior(s: ScoreModel, h: HModel | None, obs: ObservationSet, P: int = 16,
                     seed: int = 0, step_t: int = 0) -> PosteriorEnsemble:
    """Draw *P* posterior grids with the combined noise estimate eps_theta + eps_zeta.

    A disabled (``None``) or null h-model makes this the unconditional sampler.
    """
    if P < 2:
        raise ValueError("P must be >= 2")
    return PosteriorEnsemble(run_chains(s, h, obs, seed, range(P)), seed, step_t)


def corrected_tweedie(s: ScoreModel, h: HModel | None, x_t, obs: ObservationSet, t):
    """Denoised estimate under the posterior noise prediction.

    Equals the unconditional Tweedie estimate minus
    ``sqrt(1 - ab) / sqrt(ab) * h_output``.
    """
    sched = s.schedule
    eps_theta = s.predict_eps(x_t, t)
    x0_uncond = tweedie(sched, x_t, eps_theta, t)
    eps_zeta = h_correct(h, x_t, x0_uncond, obs, t)
    return tweedie(sched, x_t, eps_theta + eps_zeta, t)
