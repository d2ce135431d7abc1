import hashlib
import json

import numpy as np
import pytest

from emptdm import nn
from emptdm.harness.config import ExperimentConfig
from emptdm.memory_permanent import load_score_model, save_score_model
from emptdm.schedule import NoiseSchedule

nn.tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.linear()


def _prior_key(cfg: ExperimentConfig) -> str:
    fields = {k: v for k, v in cfg.to_dict().items()
              if k.startswith(("prior", "corpus", "pretrain", "gmm", "beta", "T", "eta"))}
    return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).hexdigest()[:12]


@pytest.fixture(scope="session")
def pretrained_prior(request):
    """Denoiser pretrained on the digits-like corpus, cached across sessions."""
    from emptdm.harness.runner import build_prior

    cfg = ExperimentConfig()
    path = request.config.cache.mkdir("emptdm") / f"prior-{_prior_key(cfg)}.npz"
    if path.exists():
        return load_score_model(path)
    model = build_prior(cfg)
    save_score_model(model, path)
    return model


@pytest.fixture(scope="session")
def paper_text():
    """Reference document with LaTeX emphasis stripped, whitespace collapsed."""
    import re
    from pathlib import Path

    raw = (Path(__file__).resolve().parents[1] / "paper.md").read_text()
    raw = re.sub(r"\\(textbf|emph)\{", "", raw).replace("}", "").replace("$\\pm$", "±")
    return re.sub(r"[ \t]+", " ", raw)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record (and print) one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def emit(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
