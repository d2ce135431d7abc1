"""Permanent memory: the frozen prior noise predictor.

Two backends share the ``predict_eps(x_t, t)`` interface:

* ``GaussianMixtureScore`` -- closed-form noise prediction of an isotropic
  Gaussian mixture diffused by the schedule. Exact, used by the oracles.
* ``TinyDenoiser`` -- a small MLP noise predictor trained by denoising score
  matching on a corpus of grids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import nn
from .schedule import NoiseSchedule, forward_noise


@dataclass
class TrainBuffer:
    samples: np.ndarray
    capacity: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim == 2:
            self.samples = self.samples[None]
        if self.samples.ndim != 3:
            raise ValueError("buffer samples must be a stack of 2-D grids")
        if self.capacity is not None and len(self.samples) > self.capacity:
            self.samples = self.samples[-self.capacity:]

    def __len__(self):
        return len(self.samples)

    @property
    def shape(self):
        return self.samples.shape[1:]

    def add(self, samples) -> None:
        samples = np.asarray(samples, dtype=float).reshape(-1, *self.shape)
        self.samples = np.concatenate([self.samples, samples])
        if self.capacity is not None and len(self.samples) > self.capacity:
            self.samples = self.samples[-self.capacity:]


class ScoreModel:
    backend: str
    schedule: NoiseSchedule
    params: dict

    def predict_eps(self, x_t, t):  # pragma: no cover - interface
        raise NotImplementedError

    def checksum(self) -> str:
        return nn.params_checksum(self.params)


def predict_eps(model: ScoreModel, x_t, t):
    return model.predict_eps(x_t, t)


# ----------------------------------------------------------- analytic backend

class GaussianMixtureScore(ScoreModel):
    """Prior ``sum_k w_k N(mu_k, var I)`` over grids, diffused in closed form."""

    backend = "analytic-gmm"

    def __init__(self, means, weights, var: float, schedule: NoiseSchedule):
        means = np.asarray(means, dtype=float)
        if means.ndim == 2:
            means = means[None]
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(means),) or np.any(weights < 0):
            raise ValueError("one non-negative weight per component required")
        if not np.isclose(weights.sum(), 1.0):
            raise ValueError("mixture weights must sum to 1")
        if var <= 0:
            raise ValueError("component variance must be positive")
        self.schedule = schedule
        self.params = {"means": means, "weights": weights, "var": np.array(float(var))}

    @classmethod
    def from_corpus(cls, buffer: TrainBuffer, k: int, var: float,
                    schedule: NoiseSchedule, seed: int = 0) -> "GaussianMixtureScore":
        """Equal-weight mixture whose means are *k* corpus grids picked at random."""
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(buffer), size=min(k, len(buffer)), replace=False)
        means = buffer.samples[np.sort(idx)]
        return cls(means, np.full(len(means), 1.0 / len(means)), var, schedule)

    @property
    def means(self):
        return self.params["means"]

    @property
    def weights(self):
        return self.params["weights"]

    @property
    def var(self) -> float:
        return float(self.params["var"])

    def _diffused(self, t):
        ab = float(self.schedule.alpha_bar[self.schedule.check_step(t)])
        return ab, ab * self.var + 1.0 - ab

    def _responsibilities(self, x, ab, v):
        d = x[:, None] - np.sqrt(ab) * self.means[None]          # (B, K, H, W)
        sq = (d ** 2).reshape(d.shape[0], d.shape[1], -1).sum(-1)
        logits = np.log(self.weights)[None] - sq / (2 * v)
        gamma = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return d, gamma, logits

    def predict_eps(self, x_t, t):
        x = np.asarray(x_t, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        t_arr = np.broadcast_to(np.asarray(t), (len(x),))
        out = np.empty_like(x)
        for tv in np.unique(t_arr):
            sel = t_arr == tv
            ab, v = self._diffused(int(tv))
            d, gamma, _ = self._responsibilities(x[sel], ab, v)
            out[sel] = np.sqrt(1 - ab) / v * np.einsum("bk,bkhw->bhw", gamma, d)
        return out[0] if single else out

    def log_density(self, x_t, t) -> float:
        """log p_t(x_t) of the diffused mixture (oracle use)."""
        x = np.asarray(x_t, dtype=float)[None]
        ab, v = self._diffused(t)
        _, _, logits = self._responsibilities(x, ab, v)
        dim = x[0].size
        return float(logsumexp(logits[0]) - 0.5 * dim * np.log(2 * np.pi * v))

    def sample(self, n: int, rng: np.random.Generator):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, *self.means.shape[1:]))
        return self.means[comp] + np.sqrt(self.var) * noise


# -------------------------------------------------------------- tiny denoiser

class TinyDenoiser(ScoreModel):
    """MLP noise predictor: [x_t, time embedding] -> 64 -> 64 -> grid.

    A learned per-step scalar skip ``skip[t] * x_t`` is added to the output so
    the identity-like component of the optimal predictor at high noise does
    not have to pass through the 64-wide bottleneck.
    """

    backend = "tiny-denoiser"

    def __init__(self, shape, schedule: NoiseSchedule, hidden: int = 64,
                 embed_dim: int = 32, seed: int = 0, params=None):
        self.shape = tuple(shape)
        self.schedule = schedule
        self.hidden = hidden
        self.embed_dim = embed_dim
        self._temb = nn.timestep_embedding(np.arange(schedule.T), embed_dim)
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        d = int(np.prod(self.shape))
        p: nn.Params = {}
        nn.init_dense(p, "l1", d + embed_dim, hidden, rng)
        nn.init_dense(p, "l2", hidden, hidden, rng)
        nn.init_dense(p, "out", hidden, d, rng)
        p["out.W"] *= 0.1
        p["skip"] = np.full(schedule.T, 0.5)
        self.params = p

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def _forward(self, x, t_arr):
        b = len(x)
        xf = x.reshape(b, -1)
        inp = np.concatenate([xf, self._temb[t_arr]], axis=1)
        a1 = nn.dense(self.params, "l1", inp)
        h1 = nn.silu(a1)
        a2 = nn.dense(self.params, "l2", h1)
        h2 = nn.silu(a2)
        skip = self.params["skip"][t_arr][:, None]
        out = nn.dense(self.params, "out", h2) + skip * xf
        return out.reshape(x.shape), (xf, inp, a1, h1, a2, h2, t_arr)

    def predict_eps(self, x_t, t):
        x = np.asarray(x_t, dtype=float)
        single = x.ndim == 2
        if single:
            x = x[None]
        t_arr = np.broadcast_to(np.asarray(t, dtype=int), (len(x),))
        if np.any(t_arr < 0) or np.any(t_arr >= self.schedule.T):
            raise IndexError("diffusion step out of range")
        out, _ = self._forward(x, t_arr)
        return out[0] if single else out

    def loss_and_grads(self, x_t, t_arr, target):
        """Mean squared error against *target* and parameter gradients."""
        out, (xf, inp, a1, h1, a2, h2, t_arr) = self._forward(x_t, t_arr)
        b = len(x_t)
        resid = (out - target).reshape(b, -1)
        loss = float(np.mean(resid ** 2))
        g = 2.0 * resid / resid.size
        grads: nn.Params = {}
        grads["skip"] = np.zeros_like(self.params["skip"])
        np.add.at(grads["skip"], t_arr, (g * xf).sum(axis=1))
        gh2 = nn.dense_backward(self.params, "out", h2, g, grads)
        ga2 = nn.silu_backward(a2, gh2)
        gh1 = nn.dense_backward(self.params, "l2", h1, ga2, grads)
        ga1 = nn.silu_backward(a1, gh1)
        nn.dense_backward(self.params, "l1", inp, ga1, grads)
        return loss, grads

    def copy(self) -> "TinyDenoiser":
        return TinyDenoiser(self.shape, self.schedule, self.hidden, self.embed_dim,
                            params=nn.copy_params(self.params))

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.params, {
            "backend": self.backend, "kind": "permanent", "shape": list(self.shape),
            "hidden": self.hidden, "embed_dim": self.embed_dim,
            "schedule": self.schedule.to_dict(), "schedule_hash": self.schedule.digest()})


def load_score_model(path) -> ScoreModel:
    params, meta = nn.load_checkpoint(path)
    sched = NoiseSchedule.from_betas(meta["schedule"]["beta"], eta=meta["schedule"]["eta"])
    if sched.digest() != meta["schedule_hash"]:
        raise ValueError("schedule hash mismatch in checkpoint")
    if meta["backend"] == TinyDenoiser.backend:
        return TinyDenoiser(meta["shape"], sched, meta["hidden"], meta["embed_dim"], params=params)
    if meta["backend"] == GaussianMixtureScore.backend:
        return GaussianMixtureScore(params["means"], params["weights"], float(params["var"]), sched)
    raise ValueError(f"unknown backend {meta['backend']!r}")


def save_score_model(model: ScoreModel, path) -> None:
    if isinstance(model, TinyDenoiser):
        model.save(path)
        return
    nn.save_checkpoint(path, model.params, {
        "backend": model.backend, "kind": "permanent",
        "schedule": model.schedule.to_dict(), "schedule_hash": model.schedule.digest()})


# ------------------------------------------------------------------ training

def _dsm_epochs(model: TinyDenoiser, buffer: TrainBuffer, epochs: int, lr: float,
                seed: int, batch_size: int, optimizer: str) -> list[float]:
    rng = np.random.default_rng(seed)
    opt = nn.make_optimizer(optimizer, model.params, lr)
    sched = model.schedule
    losses = []
    n = len(buffer)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            x0 = buffer.samples[order[start:start + batch_size]]
            t = rng.integers(0, sched.T, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(sched, x0, t, eps)
            loss, grads = model.loss_and_grads(x_t, t, eps)
            opt.step(model.params, grads)
            total += loss * len(x0)
        losses.append(total / n)
    return losses


def pretrain_denoiser(buffer: TrainBuffer, schedule: NoiseSchedule, epochs: int = 200,
                      lr: float = 1e-3, seed: int = 0, batch_size: int = 64,
                      optimizer: str = "adam", hidden: int = 64,
                      embed_dim: int = 32) -> TinyDenoiser:
    """Train a fresh TinyDenoiser by denoising score matching on *buffer*.

    The per-epoch mean training loss is kept on ``model.train_log``.
    """
    if len(buffer) == 0:
        raise ValueError("empty training buffer")
    model = TinyDenoiser(buffer.shape, schedule, hidden=hidden, embed_dim=embed_dim, seed=seed)
    model.train_log = _dsm_epochs(model, buffer, epochs, lr, seed + 1, batch_size, optimizer)
    return model


def update_permanent(model: ScoreModel, posterior_buffer: TrainBuffer, epochs: int = 20,
                     lr: float = 1e-4, seed: int = 0, batch_size: int = 16,
                     optimizer: str = "adam") -> ScoreModel:
    """Fine-tune a copy of a trainable prior on posterior samples; *model* is untouched."""
    if not isinstance(model, TinyDenoiser):
        raise TypeError(f"backend {model.backend!r} does not support permanent-memory updates")
    if len(posterior_buffer) == 0:
        raise ValueError("empty posterior buffer")
    new = model.copy()
    new.train_log = _dsm_epochs(new, posterior_buffer, epochs, lr, seed, batch_size, optimizer)
    return new
