"""Small numpy building blocks for the tiny networks: layers with hand-written
backward passes, optimizers, time embeddings and the checkpoint file layout.

Every network in the package keeps its weights in a flat ``dict[str, ndarray]``
so that checksums, copies and checkpoints work uniformly.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import hashlib
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

Params = dict[str, np.ndarray]

CHECKPOINT_SCHEMA = "emptdm-checkpoint/1"


def tune_allocator(threshold: int = 1 << 28) -> bool:
    """Raise glibc's mmap/trim thresholds so multi-megabyte temporaries are
    recycled instead of being mapped and faulted in on every call.

    Numerics are unaffected; only speed. Returns False where glibc's
    ``mallopt`` is unavailable.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(mallopt(m_mmap_threshold, threshold)) and bool(mallopt(m_trim_threshold, 2 * threshold))


# ---------------------------------------------------------------- activations

def sigmoid(x):
    return expit(x)


def silu(x):
    return x * sigmoid(x)


def silu_backward(x, grad):
    s = sigmoid(x)
    return grad * (s * (1.0 + x * (1.0 - s)))


def leaky_relu(x, slope=0.01):
    return np.maximum(x, slope * x)


def leaky_relu_backward(x, grad, slope=0.01):
    return np.where(x > 0, grad, slope * grad)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# -------------------------------------------------------------------- layers

def init_dense(params: Params, name: str, n_in: int, n_out: int,
               rng: np.random.Generator | None, zero: bool = False) -> None:
    """Add ``name.W`` (n_in, n_out) and ``name.b`` (n_out,) to *params*.

    Non-zero weights use a He-style normal scaled for SiLU/leaky units.
    """
    if zero or rng is None:
        params[f"{name}.W"] = np.zeros((n_in, n_out))
    else:
        params[f"{name}.W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
    params[f"{name}.b"] = np.zeros(n_out)


def dense(params: Params, name: str, x):
    return x @ params[f"{name}.W"] + params[f"{name}.b"]


def dense_backward(params: Params, name: str, x, grad, grads: Params):
    """Accumulate parameter grads for a dense layer and return d(input)."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad.reshape(-1, grad.shape[-1])
    grads[f"{name}.W"] = grads.get(f"{name}.W", 0.0) + x2.T @ g2
    grads[f"{name}.b"] = grads.get(f"{name}.b", 0.0) + g2.sum(axis=0)
    return grad @ params[f"{name}.W"].T


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of integer step indices, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# ---------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.n = 0

    def step(self, params: Params, grads: Params) -> None:
        if self.lr == 0:
            return
        self.n += 1
        c1 = 1.0 - self.b1 ** self.n
        c2 = 1.0 - self.b2 ** self.n
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    """Plain SGD with heavy-ball momentum."""

    def __init__(self, params: Params, lr: float = 1e-2, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params) -> None:
        if self.lr == 0:
            return
        for k, g in grads.items():
            self.buf[k] = self.momentum * self.buf[k] + g
            params[k] -= self.lr * self.buf[k]


def make_optimizer(name: str, params: Params, lr: float):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


# --------------------------------------------------------------- utilities

def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def params_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: Params, meta: dict) -> None:
    """Write parameters plus a JSON metadata record to an ``.npz`` archive.

    Layout: one array per named parameter tensor, and a ``__meta__`` entry
    holding UTF-8 JSON with at least ``schema``, ``backend`` and ``kind``.
    """
    meta = {"schema": CHECKPOINT_SCHEMA, **meta}
    meta["shapes"] = {k: list(v.shape) for k, v in params.items()}
    arrays = {k: np.asarray(v) for k, v in params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Params, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        params = {k: data[k].copy() for k in data.files if k != "__meta__"}
    return params, meta
