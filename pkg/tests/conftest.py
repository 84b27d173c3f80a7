import numpy as np
import pytest

from icl_newton.taskgen import TaskTemplate, sample_batch


@pytest.fixture(scope="session")
def iso_batch():
    """64 noiseless isotropic tasks, d=20, n=40."""
    return sample_batch(64, TaskTemplate(20, 40), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests.verdicts import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
