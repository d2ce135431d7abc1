"""Experiment configuration: one flat dataclass, loadable from YAML and
overridable field by field."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..policy import PolicyConfig
from ..schedule import NoiseSchedule

METHODS = ("em-ptdm", "rs", "ga", "diffatd-static")
OUTPUT_ENV = "EMPTDM_OUTPUT"


@dataclass
class ExperimentConfig:
    method: str = "em-ptdm"
    # task source
    task_kind: str = "balls"            # balls | file
    task_file: str | None = None
    patch: int = 1
    seeds: list = field(default_factory=lambda: [0])
    budget: int = 250
    # scoring
    P: int = 16
    sigma_x: float = 1.0
    normalization: str = "minmax"
    alpha_mode: str = "linear-remaining"
    amplification: float = 1.0
    # diffusion schedule
    T: int = 30
    beta_start: float = 1e-4
    beta_end: float = 0.2
    eta: float = 0.0
    # permanent memory
    prior_backend: str = "tiny-denoiser"   # tiny-denoiser | analytic-gmm
    prior_checkpoint: str | None = None
    prior_corpus: str = "digits-like"
    corpus_n: int = 2000
    corpus_seed: int = 7
    pretrain_epochs: int = 150
    pretrain_lr: float = 2e-3
    pretrain_optimizer: str = "adam"
    gmm_components: int = 16
    gmm_var: float = 0.02
    permanent_update: bool = False
    pm_epochs: int = 30
    pm_lr: float = 5e-4
    # transient memory
    update_mode: str = "adaptive"          # adaptive | uniform | none
    updates_U: int = 30
    gamma: float = 1.0
    uniform_every: int = 20
    h_epochs: int = 20
    h_lr: float = 1e-3
    h_batch: int = 16
    buffer_P: int | None = None
    h_local_width: int = 8
    pin_observed: bool = True
    # reward model
    reward_epochs: int = 3
    reward_lr: float = 0.01
    reward_threshold: float | None = None
    # output
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.update_mode not in ("adaptive", "uniform", "none"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.budget < 1 or self.P < 2:
            raise ValueError("budget must be >= 1 and P >= 2")
        if self.prior_backend not in ("tiny-denoiser", "analytic-gmm"):
            raise ValueError(f"unknown prior_backend {self.prior_backend!r}")
        if self.task_kind not in ("balls", "file"):
            raise ValueError(f"unknown task_kind {self.task_kind!r}")

    def validate(self) -> "ExperimentConfig":
        """Check references to files on disk; returns self for chaining."""
        if self.prior_checkpoint and not Path(self.prior_checkpoint).is_file():
            raise FileNotFoundError(f"prior checkpoint {self.prior_checkpoint} not found")
        if self.task_kind == "file" and not (self.task_file and Path(self.task_file).is_file()):
            raise FileNotFoundError(f"task file {self.task_file} not found")
        return self

    @property
    def policy(self) -> PolicyConfig:
        return PolicyConfig(self.sigma_x, self.P, self.alpha_mode, self.amplification,
                            self.normalization)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end, self.eta)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def out_dir(self) -> Path:
        root = self.output_dir or os.environ.get(OUTPUT_ENV) or "runs"
        return Path(root)


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, list):
        return [int(v) if v.lstrip("-").isdigit() else v for v in value.split(",") if v]
    if value.lower() in ("none", "null"):
        return None
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings; values are coerced to the field's current type."""
    names = {f.name for f in dataclasses.fields(cfg)}
    updates = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in names:
            raise ValueError(f"bad override {item!r}")
        updates[key] = _coerce(value.strip(), getattr(cfg, key))
    return cfg.replace(**updates)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(data) - {f.name for f in dataclasses.fields(cfg)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cfg.replace(**data)
    return apply_overrides(cfg, list(overrides))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
