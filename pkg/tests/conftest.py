import numpy as np
import pytest
import torch

from mamkit.numeric import RngStream


@pytest.fixture
def rng():
    return RngStream(1234, "test")


@pytest.fixture
def np_rng():
    return np.random.default_rng(99)


def randn(rng: RngStream, *shape, scale=1.0) -> torch.Tensor:
    return torch.from_numpy(rng.normal(size=shape, scale=scale))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
