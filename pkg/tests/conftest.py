import functools
import math

import numpy as np
import pytest
import torch

from trsbench.data import generate_synthetic, split
from trsbench.models import Ensemble, MlpClassifier
from trsbench.training import TrainConfig, train


def logistic_model(w: float = 1.0) -> MlpClassifier:
    """Two-class model with logits (0, w*x): class-1 confidence is sigmoid(w*x)."""
    m = MlpClassifier([1, 2], seed=0)
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.tensor([[0.0], [w]], dtype=torch.float64))
        m.layers[0].bias.zero_()
    return m


def zero_model(sizes=(2, 4, 3)) -> MlpClassifier:
    m = MlpClassifier(list(sizes), seed=0)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    return m


def softplus_np(z):
    return np.logaddexp(0.0, z)


# Desk-scale schedule shared by the oracle runs below.
VANILLA_SCHEDULE = dict(lr=0.05, epochs=60, batch_size=32, lr_milestones=(40,))


@functools.lru_cache(maxsize=None)
def trained_vanilla(seed: int = 0, n_models: int = 1, width: int = 64):
    """Vanilla two-moons ensemble on the documented schedule (cached per session)."""
    data = generate_synthetic("two-moons", 1000, 0.1, seed=seed)
    tr, te = split(data, 0.25, seed)
    ens = Ensemble([MlpClassifier([2, width, width, 2], seed=[seed, 0, i]) for i in range(n_models)])
    train(ens, tr, TrainConfig(mode="Vanilla", seed=seed, **VANILLA_SCHEDULE))
    return ens, tr, te


@pytest.fixture(scope="session")
def vanilla_moons():
    return trained_vanilla(0, 1)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


LN2 = math.log(2.0)


# Acceptance verdict lines, echoed in the terminal summary so they show without -s.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
