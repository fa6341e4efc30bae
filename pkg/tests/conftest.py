import numpy as np
import pytest

from ddsfl.dsfl import LayerHyperparams, TrainBatch


def subspace_batch(seed=0, d0=16, num_classes=3, per_class=30, rank=3, noise=0.05):
    """Each class lives near its own low-rank subspace plus a shared direction."""
    rng = np.random.default_rng(seed)
    shared = rng.normal(size=(1, d0))
    xs, ys = [], []
    for c in range(num_classes):
        basis = np.vstack([shared, rng.normal(size=(rank, d0))])
        x = rng.normal(size=(per_class, rank + 1)) @ basis + noise * rng.normal(size=(per_class, d0))
        xs.append(x / np.linalg.norm(x, axis=1, keepdims=True))
        ys.append(np.full(per_class, c))
    x = np.vstack(xs)
    y = np.concatenate(ys)
    return TrainBatch(x, x, y, num_classes)


@pytest.fixture
def small_batch():
    return subspace_batch()


@pytest.fixture
def mono_hp():
    return LayerHyperparams(xi=0.0, lambda1=0.01, lambda2=0.5, gamma=1.0, eta=0.5, k=3, warm_iters=50,
                            w_iters=200, outer_rounds=5, nn_refresh_period=50, max_active=8)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
