import numpy as np
import pytest

from pipeforge import data, ops, pretrain

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    """A quickly pre-trained miniature world: data splits, classifiers, SAI, pool."""
    samples = data.gen_synthetic(1200, 16, 4, data.stream_rng(11, 1))
    train, val, test = data.split(samples)
    cfg = pretrain.PretrainConfig(sai_samples=2000, sai_epochs=60)
    res = pretrain.pretrain(train, val, test, 4, seed=11, cfg=cfg)
    return {
        "train": train, "val": val, "test": test,
        "classifiers": res.classifiers, "sai": res.sai_models, "summary": res.summary,
        "registry": ops.standard_registry(res.classifiers),
    }


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
