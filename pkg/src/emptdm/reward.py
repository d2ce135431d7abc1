"""Online reward model: patch values -> probability that the patch is target."""
from __future__ import annotations

import numpy as np

from . import nn

FC_WIDTHS = (4, 32, 16, 8, 2)


class RewardModel:
    """Local mixing layer followed by dense layers 4 -> 32 -> 16 -> 8 -> 2.

    Leaky ReLU follows every layer except the last; a softmax over
    {target, non-target} gives the score. The last layer starts at zero, so
    an untrained model scores every patch 0.5.
    """

    def __init__(self, patch_shape=(1, 1), seed: int = 0, params=None):
        self.patch_shape = tuple(patch_shape)
        self.n_in = int(np.prod(self.patch_shape))
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        p: nn.Params = {}
        nn.init_dense(p, "mix", self.n_in, self.n_in, rng)
        sizes = (self.n_in,) + FC_WIDTHS
        for i in range(len(FC_WIDTHS)):
            last = i == len(FC_WIDTHS) - 1
            nn.init_dense(p, f"fc{i}", sizes[i], sizes[i + 1], None if last else rng, zero=last)
        self.params = p

    def copy(self) -> "RewardModel":
        return RewardModel(self.patch_shape, params=nn.copy_params(self.params))

    def _layers(self):
        return ["mix"] + [f"fc{i}" for i in range(len(FC_WIDTHS))]

    def logits(self, patches, chunk: int = 4096):
        x = np.asarray(patches, dtype=float).reshape(-1, self.n_in)
        names = self._layers()
        out = []
        # chunked so intermediates stay small and avoid allocator page faults
        for start in range(0, max(len(x), 1), chunk):
            a = x[start:start + chunk]
            for name in names[:-1]:
                a = nn.leaky_relu(nn.dense(self.params, name, a))
            out.append(nn.dense(self.params, names[-1], a))
        return np.concatenate(out, axis=0)

    def predict(self, patches):
        """Target probability for flattened patches of shape ``(..., n_in)``."""
        arr = np.asarray(patches, dtype=float)
        if arr.shape[-1] != self.n_in:
            raise ValueError(f"patch width {arr.shape[-1]} does not match {self.n_in}")
        z = self.logits(arr)
        return nn.softmax(z)[:, 0].reshape(arr.shape[:-1])

    def loss_and_grads(self, patches, labels):
        """Soft-label binary cross-entropy and its parameter gradients."""
        x = np.asarray(patches, dtype=float).reshape(-1, self.n_in)
        y = np.asarray(labels, dtype=float).ravel()
        names = self._layers()
        acts, pre = [x], []
        for name in names[:-1]:
            a = nn.dense(self.params, name, acts[-1])
            pre.append(a)
            acts.append(nn.leaky_relu(a))
        z = nn.dense(self.params, names[-1], acts[-1])
        d = z[:, 0] - z[:, 1]
        # log p and log(1-p) for p = sigmoid(d)
        log_p = -np.logaddexp(0.0, -d)
        log_q = -np.logaddexp(0.0, d)
        n = len(y)
        loss = float(-np.mean(y * log_p + (1 - y) * log_q))
        p = np.exp(log_p)
        gd = (p - y) / n
        gz = np.stack([gd, -gd], axis=1)
        grads: nn.Params = {}
        g = nn.dense_backward(self.params, names[-1], acts[-1], gz, grads)
        for i in range(len(names) - 2, -1, -1):
            g = nn.leaky_relu_backward(pre[i], g)
            g = nn.dense_backward(self.params, names[i], acts[i], g, grads)
        return loss, grads

    def save(self, path) -> None:
        nn.save_checkpoint(path, self.params, {"backend": "reward", "kind": "reward",
                                               "patch_shape": list(self.patch_shape)})


def reward_predict(r: RewardModel, patch) -> float:
    patch = np.asarray(patch, dtype=float)
    if patch.size != r.n_in:
        raise ValueError(f"patch of size {patch.size} does not match {r.patch_shape}")
    return float(r.predict(patch.reshape(1, r.n_in))[0])


class SupervisedStore:
    """Append-only (patch, outcome) pairs collected during one run."""

    def __init__(self, patch_shape=(1, 1)):
        self.patch_shape = tuple(patch_shape)
        self._x: list[np.ndarray] = []
        self._y: list[float] = []

    def add(self, patch, label: float) -> None:
        label = float(label)
        if not 0.0 <= label <= 1.0:
            raise ValueError("labels must lie in [0, 1]")
        self._x.append(np.asarray(patch, dtype=float).reshape(self.patch_shape))
        self._y.append(label)

    def __len__(self):
        return len(self._y)

    def arrays(self, threshold: float | None = None):
        x = np.stack(self._x) if self._x else np.zeros((0, *self.patch_shape))
        y = np.asarray(self._y, dtype=float)
        if threshold is not None:
            y = (y > threshold).astype(float)
        return x, y


def reward_update(r: RewardModel, store: SupervisedStore, epochs: int = 3, lr: float = 0.01,
                  seed: int = 0, batch_size: int = 32,
                  threshold: float | None = None) -> RewardModel:
    """Return a copy of *r* trained for *epochs* passes over *store* with Adam.

    Outcomes are soft BCE targets unless *threshold* binarises them.
    """
    if len(store) == 0:
        raise ValueError("empty supervised store")
    new = r.copy()
    x, y = store.arrays(threshold)
    rng = np.random.default_rng(seed)
    opt = nn.Adam(new.params, lr=lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = new.loss_and_grads(x[idx], y[idx])
            opt.step(new.params, grads)
            total += loss * len(idx)
        losses.append(total / len(y))
    new.train_log = losses
    return new
