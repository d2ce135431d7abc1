"""Discrete diffusion coefficients and the elementary DDIM arithmetic.

Step indices are 0-based: index ``t`` in ``[0, T)`` carries ``alpha_bar[t]``;
the reverse step from index ``t`` lands on ``alpha_bar[t - 1]``, with
``alpha_bar[-1]`` taken as 1 (clean data) for the final step ``t = 0``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    eta: float = 0.0

    @classmethod
    def from_betas(cls, betas, eta: float = 0.0) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=float).ravel()
        if beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if eta < 0:
            raise ValueError("eta must be non-negative")
        alpha_bar = np.cumprod(1.0 - beta)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = eta * np.sqrt((1 - prev) / (1 - alpha_bar)) * np.sqrt(1 - alpha_bar / prev)
        for a in (beta, alpha_bar, sigma):
            a.setflags(write=False)
        return cls(len(beta), beta, alpha_bar, sigma, float(eta))

    @classmethod
    def linear(cls, T: int = 30, beta_start: float = 1e-4, beta_end: float = 0.2,
               eta: float = 0.0) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T), eta=eta)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"diffusion step {t} outside [0, {self.T})")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        t = self.check_step(t)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.beta.tobytes())
        h.update(self.sigma.tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist(), "eta": self.eta}


def _coef(schedule: NoiseSchedule, t):
    """alpha_bar for a scalar step or a per-sample step vector (broadcast over grids)."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return float(schedule.alpha_bar[schedule.check_step(t_arr)])
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise IndexError("diffusion step out of range")
    return schedule.alpha_bar[t_arr].reshape(-1, *([1] * 2))


def forward_noise(schedule: NoiseSchedule, x0, t, eps):
    ab = _coef(schedule, t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def tweedie(schedule: NoiseSchedule, x_t, eps_hat, t):
    ab = _coef(schedule, t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_update(x_t, eps_hat, alpha_bar, alpha_bar_prev, sigma, noise=None):
    """One reverse DDIM move given explicit coefficients."""
    radicand = 1.0 - alpha_bar_prev - sigma ** 2
    if radicand < -1e-12:
        raise ValueError(f"negative radicand {radicand:.3g}: sigma too large for this step")
    x0_hat = (x_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)
    out = np.sqrt(alpha_bar_prev) * x0_hat + np.sqrt(max(radicand, 0.0)) * eps_hat
    if sigma > 0 and noise is not None:
        out = out + sigma * noise
    return out


def ddim_step(schedule: NoiseSchedule, x_t, eps_hat, t: int, noise=None):
    """Reverse step from index *t* to *t - 1*; the last step (t = 0) adds no noise."""
    t = schedule.check_step(t)
    sigma = float(schedule.sigma[t]) if t > 0 else 0.0
    return ddim_update(x_t, eps_hat, float(schedule.alpha_bar[t]),
                       schedule.alpha_bar_prev(t), sigma, noise)
