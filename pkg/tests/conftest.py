import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sslab.models import ModelConfig, build_model  # noqa: E402

ARCHS = ("lstm", "transformer")


def tiny_model(arch: str, seed: int = 0, vocab: int = 12, **kw):
    cfg = dict(arch=arch, src_vocab=vocab, tgt_vocab=vocab, emb_dim=8, hidden_dim=8, heads=2, max_len=20)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed=seed)


def randomize(model, seed: int = 0, scale: float = 1.0):
    """Redraw every parameter uniformly from [-scale, scale] in place.

    Fresh initializations leave attention gradients near 1e-16, where any
    finite-difference comparison is pure round-off; uniform weights give
    every tensor a gradient well above that noise.
    """
    r = np.random.default_rng(seed)
    for value in model.params.values():
        value[...] = r.uniform(-scale, scale, size=value.shape)
    return model


@pytest.fixture(params=ARCHS)
def arch(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_sentence(rng, vocab=12, lo=3, hi=8):
    return [int(t) for t in rng.integers(3, vocab, size=int(rng.integers(lo, hi + 1)))]


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """The full lexswap experiment (minutes). Only the acceptance suite uses it."""
    from experiment import run_experiment

    return run_experiment(tmp_path_factory.mktemp("experiment"))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
