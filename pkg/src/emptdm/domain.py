"""Tasks, observations and feedback for the partially observable grid.

Query locations are the non-overlapping ``patch_h x patch_w`` blocks of the
grid, indexed row-major over the block grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASK_SCHEMA = "emptdm-task/1"


class BudgetExhausted(RuntimeError):
    pass


class DuplicateQuery(ValueError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int
    patch_h: int = 1
    patch_w: int = 1

    def __post_init__(self):
        if min(self.height, self.width, self.patch_h, self.patch_w) < 1:
            raise ValueError("grid and patch dimensions must be positive")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ValueError(
                f"patch {self.patch_h}x{self.patch_w} does not tile grid {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def rows(self) -> int:
        return self.height // self.patch_h

    @property
    def cols(self) -> int:
        return self.width // self.patch_w

    @property
    def n_candidates(self) -> int:
        return self.rows * self.cols

    @property
    def patch_size(self) -> int:
        return self.patch_h * self.patch_w

    def patch_slice(self, q: int) -> tuple[slice, slice]:
        if not 0 <= q < self.n_candidates:
            raise IndexError(f"query index {q} outside [0, {self.n_candidates})")
        r, c = divmod(q, self.cols)
        return (slice(r * self.patch_h, (r + 1) * self.patch_h),
                slice(c * self.patch_w, (c + 1) * self.patch_w))

    def patches(self, arr):
        """Split ``(..., H, W)`` into ``(..., N, patch_h * patch_w)`` blocks."""
        arr = np.asarray(arr)
        lead = arr.shape[:-2]
        if arr.shape[-2:] != self.shape:
            raise ValueError(f"expected trailing shape {self.shape}, got {arr.shape[-2:]}")
        blocks = arr.reshape(*lead, self.rows, self.patch_h, self.cols, self.patch_w)
        blocks = np.moveaxis(blocks, -3, -2)  # (..., rows, cols, ph, pw)
        return blocks.reshape(*lead, self.n_candidates, self.patch_size)


@dataclass(frozen=True)
class Feedback:
    query_index: int
    patch_values: np.ndarray
    outcome: float


@dataclass(frozen=True, eq=False)
class SearchTask:
    grid: GridSpec
    content: np.ndarray
    target_mask: np.ndarray
    budget: int
    name: str = ""

    def outcomes(self) -> np.ndarray:
        """Target fraction of every candidate patch, shape (N,)."""
        return self.grid.patches(self.target_mask).mean(axis=-1)

    def outcome(self, q: int) -> float:
        sl = self.grid.patch_slice(q)
        return float(self.target_mask[sl].mean())

    def max_discoverable(self, threshold: float = 0.0) -> int:
        """U: number of patches whose outcome exceeds *threshold*."""
        return int((self.outcomes() > threshold).sum())


def make_task(content, target_mask, grid: GridSpec, budget: int, name: str = "") -> SearchTask:
    content = np.asarray(content, dtype=float)
    target_mask = np.asarray(target_mask)
    if content.shape != grid.shape or target_mask.shape != grid.shape:
        raise ValueError(
            f"content {content.shape} / target_mask {target_mask.shape} do not match grid {grid.shape}")
    if not np.all(np.isfinite(content)) or content.min() < 0 or content.max() > 1:
        raise ValueError("content values must lie in [0, 1]")
    if not np.isin(target_mask, (0, 1)).all():
        raise ValueError("target_mask must be binary")
    budget = int(budget)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if budget > grid.n_candidates:
        raise ValueError(f"budget {budget} exceeds candidate count {grid.n_candidates}")
    return SearchTask(grid, _frozen(content), _frozen(target_mask, np.uint8), budget, name)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    values: np.ndarray
    mask: np.ndarray
    queried: tuple[int, ...] = field(default_factory=tuple)

    @classmethod
    def empty(cls, grid: GridSpec) -> "ObservationSet":
        return cls(_frozen(np.zeros(grid.shape)), _frozen(np.zeros(grid.shape), np.uint8), ())

    @property
    def n_observed(self) -> int:
        return len(self.queried)


def query(task: SearchTask, obs: ObservationSet, q: int) -> tuple[Feedback, ObservationSet]:
    """Reveal patch *q*; returns the feedback and a new observation set."""
    q = int(q)
    sl = task.grid.patch_slice(q)
    if q in obs.queried:
        raise DuplicateQuery(f"location {q} already queried")
    if len(obs.queried) >= task.budget:
        raise BudgetExhausted(f"budget of {task.budget} queries exhausted")
    values = np.array(obs.values)
    mask = np.array(obs.mask)
    values[sl] = task.content[sl]
    mask[sl] = 1
    fb = Feedback(q, task.content[sl].copy(), float(task.target_mask[sl].mean()))
    return fb, ObservationSet(_frozen(values), _frozen(mask, np.uint8), obs.queried + (q,))


def _outcome_stream(run) -> list[float]:
    out = []
    for rec in run:
        out.append(float(rec if isinstance(rec, (int, float, np.floating)) else rec.outcome))
    return out


def success_rate(runs: Sequence[Iterable], tasks: Sequence[SearchTask],
                 threshold: float = 0.0) -> float:
    """Budget-normalised discovered target fraction averaged over tasks.

    Each run is a sequence of RunRecords (anything with ``.outcome``) or of
    raw outcomes. A task with no discoverable patch contributes 0.
    """
    if not runs:
        raise ValueError("no runs given")
    if len(runs) != len(tasks):
        raise ValueError("need exactly one task per run")
    total = 0.0
    for run, task in zip(runs, tasks):
        ys = _outcome_stream(run)
        if len(ys) > task.budget:
            raise ValueError(f"run has {len(ys)} steps, budget is {task.budget}")
        denom = min(task.budget, task.max_discoverable(threshold))
        if denom > 0:
            total += sum(ys) / denom
    return float(np.clip(total / len(runs), 0.0, 1.0))


# ------------------------------------------------------------------ task files

def task_to_dict(task: SearchTask) -> dict:
    g = task.grid
    return {
        "schema": TASK_SCHEMA,
        "name": task.name,
        "height": g.height, "width": g.width,
        "patch_h": g.patch_h, "patch_w": g.patch_w,
        "budget": task.budget,
        "content": task.content.ravel().tolist(),
        "target_mask": task.target_mask.ravel().astype(int).tolist(),
    }


def task_from_dict(d: dict) -> SearchTask:
    if d.get("schema") != TASK_SCHEMA:
        raise ValueError(f"unsupported task schema {d.get('schema')!r}")
    grid = GridSpec(d["height"], d["width"], d["patch_h"], d["patch_w"])
    content = np.asarray(d["content"], dtype=float).reshape(grid.shape)
    mask = np.asarray(d["target_mask"], dtype=np.uint8).reshape(grid.shape)
    return make_task(content, mask, grid, d["budget"], d.get("name", ""))


def save_task(task: SearchTask, path) -> None:
    Path(path).write_text(json.dumps(task_to_dict(task)))


def load_task(path) -> SearchTask:
    return task_from_dict(json.loads(Path(path).read_text()))
