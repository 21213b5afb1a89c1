import numpy as np
import pytest

from cebsnet.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return ModelConfig(stage_widths=(4, 4, 8, 8, 8), fpn_width=8, input_size=64)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from cebsnet.data import gen_synthetic

    root = tmp_path_factory.mktemp("tiny")
    return gen_synthetic(str(root), seed=7, count=8, size=64, difficulty=0.5, test_frac=0.25)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
