"""Episode orchestration: the sample -> score -> query -> learn loop, the
cross-task permanent-memory loop and the method x budget x seed suite."""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..datagen import BallsTaskSpec, gen_balls_task, gen_prior_corpus, reference_gmm
from ..domain import ObservationSet, SearchTask, load_task, query, success_rate
from ..memory_permanent import (GaussianMixtureScore, ScoreModel, TinyDenoiser, TrainBuffer,
                                load_score_model, pretrain_denoiser, update_permanent)
from ..memory_transient import HModel, schedule_updates, train_h, uniform_updates
from ..policy import baseline_random, score_candidates, select_query
from ..posterior import sample_posterior
from ..reward import RewardModel, SupervisedStore, reward_update
from .config import ExperimentConfig

log = logging.getLogger(__name__)

RECORD_SCHEMA = "emptdm-runrecord/1"


def derive_seed(seed: int, *keys) -> int:
    """Stable 32-bit seed for a named sub-purpose of an episode."""
    words = [int(seed)] + [k if isinstance(k, int) else zlib.crc32(k.encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass
class RunRecord:
    step: int
    query: int
    outcome: float
    alpha: float | None
    scores: dict | None
    cumulative: float
    h_updated: bool = False
    posterior_l2: float | None = None
    status: str = "ok"
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        d = {"schema": RECORD_SCHEMA, **asdict(self)}
        if not timing:
            d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        if d.pop("schema", RECORD_SCHEMA) != RECORD_SCHEMA:
            raise ValueError("unsupported run-record schema")
        return cls(**d)


@dataclass
class EpisodeResult:
    records: list
    task: SearchTask
    obs: ObservationSet
    h: HModel | None = None
    aborted: bool = False
    update_steps: list = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return success_rate([self.ok_records], [self.task])

    @property
    def ok_records(self):
        return [r for r in self.records if r.status == "ok"]

    @property
    def curve(self) -> list[float]:
        return [r.cumulative for r in self.ok_records]


# ----------------------------------------------------------------- priors

def build_prior(cfg: ExperimentConfig, shape=(32, 32)) -> ScoreModel:
    """Load the configured permanent memory, or build it from its corpus."""
    sched = cfg.noise_schedule()
    if cfg.prior_checkpoint:
        model = load_score_model(cfg.prior_checkpoint)
        if model.schedule.digest() != sched.digest():
            log.warning("checkpoint schedule differs from config; using checkpoint schedule")
        return model
    if cfg.prior_backend == "analytic-gmm":
        if cfg.prior_corpus == "gmm-draws":
            return reference_gmm(sched, shape)
        corpus = gen_prior_corpus(cfg.prior_corpus, max(cfg.gmm_components, 1) * 4,
                                  cfg.corpus_seed, shape)
        return GaussianMixtureScore.from_corpus(corpus, cfg.gmm_components, cfg.gmm_var, sched,
                                                seed=cfg.corpus_seed)
    corpus = gen_prior_corpus(cfg.prior_corpus, cfg.corpus_n, cfg.corpus_seed, shape)
    return pretrain_denoiser(corpus, sched, epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                             seed=cfg.corpus_seed, optimizer=cfg.pretrain_optimizer)


def make_task_for_seed(cfg: ExperimentConfig, seed: int, budget: int | None = None) -> SearchTask:
    budget = cfg.budget if budget is None else budget
    if cfg.task_kind == "file":
        task = load_task(cfg.task_file)
        return task if task.budget == budget else type(task)(task.grid, task.content,
                                                              task.target_mask, budget, task.name)
    if cfg.task_kind == "balls":
        return gen_balls_task(BallsTaskSpec(seed=seed, patch=cfg.patch, budget=budget))
    raise ValueError(f"unknown task kind {cfg.task_kind!r}")


def update_steps_for(cfg: ExperimentConfig, budget: int) -> list[int]:
    if cfg.method != "em-ptdm" or cfg.update_mode == "none" or cfg.updates_U == 0:
        return []
    if cfg.update_mode == "uniform":
        return uniform_updates(budget, cfg.uniform_every)
    return schedule_updates(budget, min(cfg.updates_U, budget), cfg.gamma)


def pinned_buffer(samples, obs: ObservationSet) -> TrainBuffer:
    """Posterior samples with revealed pixels set to their observed values."""
    samples = np.array(samples)
    m = obs.mask.astype(bool)
    samples[:, m] = obs.values[m]
    return TrainBuffer(samples)


# ----------------------------------------------------------------- episode

def run_episode(cfg: ExperimentConfig, task: SearchTask, seed: int,
                prior: ScoreModel | None = None, h: HModel | None = None) -> EpisodeResult:
    """Run one budgeted discovery episode; deterministic for a given seed."""
    grid = task.grid
    B = task.budget
    method = cfg.method
    uses_ensemble = method != "rs"
    if uses_ensemble and prior is None:
        prior = build_prior(cfg, grid.shape)
    if method == "em-ptdm" and h is None:
        h = HModel(grid.shape, prior.schedule.T, local_width=cfg.h_local_width,
                   seed=derive_seed(seed, "h-init"))
    if method != "em-ptdm":
        h = None
    prior_sum = prior.checksum() if uses_ensemble else None
    update_steps = set(update_steps_for(cfg, B))
    pcfg = cfg.policy
    buffer_P = cfg.buffer_P or cfg.P

    obs = ObservationSet.empty(grid)
    store = SupervisedStore((grid.patch_h, grid.patch_w))
    reward = RewardModel((grid.patch_h, grid.patch_w), seed=derive_seed(seed, "reward-init"))
    rs_rng = np.random.default_rng(derive_seed(seed, "random"))
    records: list[RunRecord] = []
    total = 0.0
    aborted = False
    n_steps = min(B, grid.n_candidates)

    for t in range(n_steps):
        t0 = time.perf_counter()
        updated = False
        if t in update_steps:
            buf = sample_posterior(prior, h, obs, buffer_P, seed=derive_seed(seed, "buffer", t))
            buffer = pinned_buffer(buf.samples, obs) if cfg.pin_observed else TrainBuffer(buf.samples)
            h = train_h(h, prior, buffer, obs, epochs=cfg.h_epochs, lr=cfg.h_lr,
                        seed=derive_seed(seed, "h-train", t), batch_size=cfg.h_batch)
            if not np.all(np.isfinite(h.train_log)):
                records.append(RunRecord(t, -1, 0.0, None, None, total, True, status="h-update-failed"))
                aborted = True
                break
            updated = True

        if method == "rs":
            q = baseline_random(obs.queried, grid.n_candidates, rs_rng)
            a, scores, l2 = None, None, None
        else:
            ens = sample_posterior(prior, h, obs, cfg.P, seed=derive_seed(seed, "ensemble", t),
                                   step_t=t)
            l2 = float(np.sqrt(np.mean((ens.mean() - task.content) ** 2)))
            breakdown = score_candidates(ens, grid, reward, t, B, pcfg, obs.queried)
            if method == "ga":
                fam = breakdown.exploit
                bad = not np.all(np.isfinite(fam))
                q = None if bad else select_query(fam, obs.queried)
                a = 0.0
            else:
                bad = not np.all(np.isfinite(breakdown.combined))
                q = None if bad else select_query(breakdown, obs.queried)
                a = breakdown.alpha
            if bad:
                records.append(RunRecord(t, -1, 0.0, a, None, total, updated, l2, status="non-finite-score"))
                aborted = True
                break
            scores = breakdown.record(q)

        fb, obs = query(task, obs, q)
        total += fb.outcome
        store.add(fb.patch_values, fb.outcome)
        reward = reward_update(reward, store, epochs=cfg.reward_epochs, lr=cfg.reward_lr,
                               seed=derive_seed(seed, "reward", t), threshold=cfg.reward_threshold)
        records.append(RunRecord(t, q, fb.outcome, a, scores, total, updated, l2,
                                 wall_clock=time.perf_counter() - t0))

    if uses_ensemble and prior.checksum() != prior_sum:
        raise RuntimeError("permanent memory was modified during an episode")
    return EpisodeResult(records, task, obs, h, aborted, sorted(update_steps))


# -------------------------------------------------------------- cross-task

def cross_task_loop(cfg: ExperimentConfig, tasks, seed: int,
                    prior: ScoreModel | None = None) -> list[EpisodeResult]:
    """Run tasks in sequence; with ``permanent_update`` the prior is fine-tuned
    on final posterior samples after each task."""
    if prior is None:
        prior = build_prior(cfg, tasks[0].grid.shape)
    if cfg.permanent_update and not isinstance(prior, TinyDenoiser):
        raise TypeError("permanent-memory updates need a trainable backend")
    results = []
    for k, task in enumerate(tasks):
        res = run_episode(cfg, task, derive_seed(seed, "task", k), prior=prior)
        results.append(res)
        if cfg.permanent_update:
            h = res.h if cfg.method == "em-ptdm" else None
            final = sample_posterior(prior, h, res.obs, cfg.buffer_P or cfg.P,
                                     seed=derive_seed(seed, "final-buffer", k))
            buffer = pinned_buffer(final.samples, res.obs) if cfg.pin_observed else TrainBuffer(final.samples)
            prior = update_permanent(prior, buffer, epochs=cfg.pm_epochs, lr=cfg.pm_lr,
                                     seed=derive_seed(seed, "pm-update", k))
    return results


# ------------------------------------------------------------------- suite

@dataclass
class SuiteResult:
    methods: list
    budgets: list
    seeds: list
    sr: dict = field(default_factory=dict)          # (method, budget) -> {seed: SR}
    curves: dict = field(default_factory=dict)      # (method, budget) -> {seed: [R_t]}
    failures: dict = field(default_factory=dict)    # (method, budget) -> {seed: message}

    def cell(self, method, budget) -> np.ndarray:
        return np.array([self.sr[(method, budget)][s] for s in self.seeds
                         if s in self.sr.get((method, budget), {})])

    def complete(self, method, budget) -> bool:
        return len(self.sr.get((method, budget), {})) == len(self.seeds)

    def table(self) -> list[dict]:
        rows = []
        for m in self.methods:
            for b in self.budgets:
                v = self.cell(m, b)
                rows.append({"method": m, "budget": b, "n": int(v.size),
                             "mean": float(v.mean()) if v.size else float("nan"),
                             "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                             "complete": self.complete(m, b)})
        return rows


# Methods whose step-t choice never looks at the budget: a run at the largest
# budget contains every smaller-budget run as a prefix.
BUDGET_FREE = ("rs", "ga")


def truncate_episode(ep: EpisodeResult, budget: int) -> EpisodeResult:
    """The same episode as if it had been run with the smaller *budget*."""
    t = ep.task
    task = type(t)(t.grid, t.content, t.target_mask, budget, t.name)
    return EpisodeResult(ep.records[:budget], task, ep.obs, ep.h, ep.aborted,
                         [u for u in ep.update_steps if u < budget])


def run_suite(cfg: ExperimentConfig, methods=None, budgets=None, seeds=None,
              prior: ScoreModel | None = None, log_dir=None) -> SuiteResult:
    """Cross product of methods x budgets x seeds; failures are recorded and skipped.

    Budget-independent baselines are run once at the largest budget and
    truncated for the others.
    """
    methods = list(methods or [cfg.method])
    budgets = list(budgets or [cfg.budget])
    seeds = list(seeds if seeds is not None else cfg.seeds)
    if prior is None and any(m != "rs" for m in methods):
        prior = build_prior(cfg)
    res = SuiteResult(methods, budgets, seeds)
    for m in methods:
        cache: dict = {}
        for b in budgets:
            key = (m, b)
            res.sr[key], res.curves[key], res.failures[key] = {}, {}, {}
            for s in seeds:
                try:
                    if m in BUDGET_FREE:
                        if s not in cache:
                            top = max(budgets)
                            cache[s] = run_episode(cfg.replace(method=m, budget=top),
                                                   make_task_for_seed(cfg, s, top), s, prior=prior)
                        ep = truncate_episode(cache[s], b)
                    else:
                        task = make_task_for_seed(cfg, s, b)
                        ep = run_episode(cfg.replace(method=m, budget=b), task, s, prior=prior)
                    if ep.aborted:
                        raise RuntimeError(ep.records[-1].status)
                except Exception as exc:  # noqa: BLE001 - partial-failure policy
                    log.warning("cell %s seed %s failed: %s", key, s, exc)
                    res.failures[key][s] = str(exc)
                    continue
                res.sr[key][s] = ep.success_rate
                res.curves[key][s] = ep.curve
                if log_dir is not None:
                    write_records(ep.records, Path(log_dir) / f"{m}_B{b}_s{s}.jsonl")
    return res


# ------------------------------------------------------------- run logs

def write_records(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


SUITE_SCHEMA = "emptdm-suite/1"


def suite_to_dict(res: SuiteResult) -> dict:
    cells = []
    for (m, b), by_seed in res.sr.items():
        cells.append({"method": m, "budget": b,
                      "sr": {str(s): v for s, v in by_seed.items()},
                      "curves": {str(s): c for s, c in res.curves.get((m, b), {}).items()},
                      "failures": {str(s): e for s, e in res.failures.get((m, b), {}).items()}})
    return {"schema": SUITE_SCHEMA, "methods": res.methods, "budgets": res.budgets,
            "seeds": res.seeds, "cells": cells}


def suite_from_dict(d: dict) -> SuiteResult:
    if d.get("schema") != SUITE_SCHEMA:
        raise ValueError("unsupported suite schema")
    res = SuiteResult(list(d["methods"]), list(d["budgets"]), list(d["seeds"]))
    for c in d["cells"]:
        key = (c["method"], c["budget"])
        res.sr[key] = {int(s): v for s, v in c["sr"].items()}
        res.curves[key] = {int(s): v for s, v in c["curves"].items()}
        res.failures[key] = {int(s): e for s, e in c["failures"].items()}
    return res


def save_suite(res: SuiteResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(suite_to_dict(res), indent=1))


def load_suite(path) -> SuiteResult:
    return suite_from_dict(json.loads(Path(path).read_text()))
