"""Transient memory: the h-transform correction network, its denoising
score-matching trainer and the update scheduler."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .domain import ObservationSet
from .memory_permanent import ScoreModel, TrainBuffer
from .schedule import NoiseSchedule, forward_noise, tweedie


class HModel:
    """Noise-correction network ``h(x_t, x0_hat, y, t)``.

    Inputs per pixel are four channels: noisy state, Tweedie estimate,
    observed values (zero where unrevealed) and the reveal mask. Two branches
    are summed:

    * a global dense branch over the flattened channels plus the time
      embedding, widths ``widths`` (default 32 -> 64), projecting back to the grid;
    * a per-pixel branch (a 1x1 convolution stack, leaky-ReLU) of width
      ``local_width`` whose hidden layer also receives a projection of the
      time embedding.

    Output heads of both branches start at exactly zero, so a fresh model
    returns an identically zero correction while its hidden layers can still
    learn. ``HModel.zeros`` gives the all-zero parameter set.
    """

    kind = "transient"
    head_keys = ("g_out.W", "g_out.b", "loc_out.W", "loc_out.b")

    def __init__(self, shape, T: int, embed_dim: int = 32, widths=(32, 64),
                 local_width: int = 8, seed: int = 0, params=None):
        self.shape = tuple(shape)
        self.T = int(T)
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.local_width = local_width
        self._temb = nn.timestep_embedding(np.arange(self.T), embed_dim)
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        d = int(np.prod(self.shape))
        p: nn.Params = {}
        w1, w2 = self.widths
        nn.init_dense(p, "g1", 4 * d + embed_dim, w1, rng)
        nn.init_dense(p, "g2", w1, w2, rng)
        nn.init_dense(p, "g_out", w2, d, None, zero=True)
        nn.init_dense(p, "loc1", 4, local_width, rng)
        nn.init_dense(p, "loc_t", embed_dim, local_width, rng)
        p["loc_t.W"] *= 0.1
        nn.init_dense(p, "loc_out", local_width, 1, None, zero=True)
        self.params = p

    @classmethod
    def zeros(cls, shape, T: int, **kw) -> "HModel":
        h = cls(shape, T, **kw)
        h.params = {k: np.zeros_like(v) for k, v in h.params.items()}
        return h

    def is_null(self) -> bool:
        """True when both output heads are zero, i.e. the output is identically 0."""
        return not any(np.any(self.params[k]) for k in self.head_keys)

    def copy(self) -> "HModel":
        return HModel(self.shape, self.T, self.embed_dim, self.widths, self.local_width,
                      params=nn.copy_params(self.params))

    def checksum(self) -> str:
        return nn.params_checksum(self.params)

    # ------------------------------------------------------------- forward

    def _features(self, x_t, x0_hat, obs_values, obs_mask):
        b = len(x_t)
        m = np.broadcast_to(np.asarray(obs_mask, dtype=float), x_t.shape)
        y = np.broadcast_to(np.asarray(obs_values, dtype=float), x_t.shape) * m
        return np.stack([x_t.reshape(b, -1), x0_hat.reshape(b, -1),
                         y.reshape(b, -1), m.reshape(b, -1)], axis=1)  # (B, 4, D)

    def _forward(self, feats, t_arr):
        p = self.params
        b = len(feats)
        temb = self._temb[t_arr]
        ginp = np.concatenate([feats.reshape(b, -1), temb], axis=1)
        ga1 = nn.dense(p, "g1", ginp)
        gh1 = nn.silu(ga1)
        ga2 = nn.dense(p, "g2", gh1)
        gh2 = nn.silu(ga2)
        gout = nn.dense(p, "g_out", gh2)
        # per-pixel branch kept channel-first: (w, 4) @ (B, 4, D) is much
        # faster in BLAS than (B*D, 4) @ (4, w)
        la1 = np.matmul(p["loc1.W"].T, feats)
        la1 += (nn.dense(p, "loc_t", temb) + p["loc1.b"])[:, :, None]
        lh1 = nn.leaky_relu(la1)
        lout = np.matmul(p["loc_out.W"].T, lh1)[:, 0, :] + p["loc_out.b"]
        cache = (feats, temb, ginp, ga1, gh1, ga2, gh2, la1, lh1)
        return gout + lout, cache

    def __call__(self, x_t, x0_hat, obs_values, obs_mask, t):
        x_t = np.asarray(x_t, dtype=float)
        single = x_t.ndim == 2
        if single:
            x_t, x0_hat = x_t[None], np.asarray(x0_hat)[None]
        t_arr = np.broadcast_to(np.asarray(t, dtype=int), (len(x_t),))
        if np.any(t_arr < 0) or np.any(t_arr >= self.T):
            raise IndexError("diffusion step out of range")
        feats = self._features(x_t, np.asarray(x0_hat, dtype=float), obs_values, obs_mask)
        out, _ = self._forward(feats, t_arr)
        out = out.reshape(x_t.shape)
        return out[0] if single else out

    def loss_and_grads(self, x_t, x0_hat, obs_values, obs_mask, t_arr, target):
        """Mean over the batch of ``||h - target||^2`` and its parameter gradients."""
        feats = self._features(x_t, x0_hat, obs_values, obs_mask)
        out, cache = self._forward(feats, t_arr)
        feats, temb, ginp, ga1, gh1, ga2, gh2, la1, lh1 = cache
        b = len(x_t)
        resid = out - target.reshape(b, -1)
        loss = float(np.sum(resid ** 2) / b)
        g = 2.0 * resid / b
        grads: nn.Params = {}
        dgh2 = nn.dense_backward(self.params, "g_out", gh2, g, grads)
        dga2 = nn.silu_backward(ga2, dgh2)
        dgh1 = nn.dense_backward(self.params, "g2", gh1, dga2, grads)
        dga1 = nn.silu_backward(ga1, dgh1)
        nn.dense_backward(self.params, "g1", ginp, dga1, grads)
        w_out = self.params["loc_out.W"]
        grads["loc_out.W"] = np.einsum("bwd,bd->w", lh1, g)[:, None]
        grads["loc_out.b"] = np.array([g.sum()])
        dla1 = nn.leaky_relu_backward(la1, w_out[None, :, :] * g[:, None, :])
        grads["loc1.W"] = np.matmul(feats, dla1.transpose(0, 2, 1)).sum(axis=0)
        grads["loc1.b"] = dla1.sum(axis=(0, 2))
        nn.dense_backward(self.params, "loc_t", temb, dla1.sum(axis=2), grads)
        return loss, grads

    def save(self, path, schedule: NoiseSchedule | None = None) -> None:
        meta = {"backend": "h-model", "kind": self.kind, "shape": list(self.shape), "T": self.T,
                "embed_dim": self.embed_dim, "widths": list(self.widths),
                "local_width": self.local_width}
        if schedule is not None:
            meta["schedule_hash"] = schedule.digest()
        nn.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "HModel":
        params, meta = nn.load_checkpoint(path)
        if meta.get("kind") != cls.kind:
            raise ValueError("checkpoint is not a transient-memory model")
        return cls(meta["shape"], meta["T"], meta["embed_dim"], meta["widths"],
                   meta["local_width"], params=params)


def h_correct(h: HModel | None, x_t, x0_hat, obs: ObservationSet, t):
    """Correction noise for the posterior estimate; zeros when *h* is disabled."""
    if h is None:
        return np.zeros_like(np.asarray(x_t, dtype=float))
    return h(x_t, x0_hat, obs.values, obs.mask, t)


# -------------------------------------------------------------- DSM training

@dataclass
class DsmBatch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        if len(self.x0) == 0:
            raise ValueError("empty DSM batch")
        if not (self.x0.shape == self.eps.shape and len(self.t) == len(self.x0)):
            raise ValueError("DSM batch arrays are not shape-consistent")


def make_dsm_batch(samples, T: int, rng: np.random.Generator) -> DsmBatch:
    samples = np.asarray(samples, dtype=float)
    return DsmBatch(samples, rng.integers(0, T, size=len(samples)),
                    rng.standard_normal(samples.shape))


def _dsm_inputs(s: ScoreModel, batch: DsmBatch):
    sched = s.schedule
    x_t = forward_noise(sched, batch.x0, batch.t, batch.eps)
    eps_theta = s.predict_eps(x_t, batch.t)
    x0_hat = tweedie(sched, x_t, eps_theta, batch.t)
    return x_t, eps_theta, x0_hat


def dsm_loss(h: HModel, s: ScoreModel, batch: DsmBatch, obs: ObservationSet) -> float:
    """Batch mean of ``||h(H_t, x0_hat, y) + eps_theta(H_t) - eps||^2``."""
    x_t, eps_theta, x0_hat = _dsm_inputs(s, batch)
    out = h(x_t, x0_hat, obs.values, obs.mask, batch.t)
    resid = (out + eps_theta - batch.eps).reshape(len(batch.x0), -1)
    return float(np.sum(resid ** 2) / len(batch.x0))


def dsm_loss_and_grads(h: HModel, s: ScoreModel, batch: DsmBatch, obs: ObservationSet):
    x_t, eps_theta, x0_hat = _dsm_inputs(s, batch)
    return h.loss_and_grads(x_t, x0_hat, obs.values, obs.mask, batch.t,
                            batch.eps - eps_theta)


def train_h(h: HModel, s: ScoreModel, buffer: TrainBuffer, obs: ObservationSet,
            epochs: int = 20, lr: float = 1e-3, seed: int = 0,
            batch_size: int = 16) -> HModel:
    """Fit a copy of *h* to the posterior buffer; the frozen prior is only evaluated.

    Per-epoch training losses are stored on ``new_h.train_log``.
    """
    if len(buffer) == 0:
        raise ValueError("empty posterior buffer")
    new = h.copy()
    rng = np.random.default_rng(seed)
    opt = nn.Adam(new.params, lr=lr)
    losses = []
    n = len(buffer)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = make_dsm_batch(buffer.samples[order[start:start + batch_size]], s.schedule.T, rng)
            loss, grads = dsm_loss_and_grads(new, s, batch, obs)
            opt.step(new.params, grads)
            total += loss * len(batch.x0)
        losses.append(total / n)
    new.train_log = losses
    return new


# -------------------------------------------------------------- scheduling

def update_intervals(B: int, U: int, gamma: float) -> np.ndarray:
    """Intervals ``(B/U) * (1 - i/(U+1))**gamma`` for update counter i = 0..U-1."""
    if U < 1 or gamma < 1 or B < U:
        raise ValueError("need U >= 1, gamma >= 1 and B >= U")
    i = np.arange(U)
    return (B / U) * (1.0 - i / (U + 1.0)) ** gamma


def schedule_updates(B: int, U: int, gamma: float = 1.0) -> list[int]:
    """Query steps at which the h-model is retrained (adaptive schedule).

    Cumulative interval sums are rounded, clipped into ``[1, B-1]`` and
    deduplicated, so late sub-unit intervals merge.
    """
    steps = np.rint(np.cumsum(update_intervals(B, U, gamma))).astype(int)
    steps = np.clip(steps, 1, B - 1) if B > 1 else steps[:0]
    return sorted(set(int(s) for s in steps))


def uniform_updates(B: int, every: int = 20) -> list[int]:
    if every < 1:
        raise ValueError("update interval must be >= 1")
    return list(range(every, B, every))
