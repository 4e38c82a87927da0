import numpy as np
import pytest
import torch

from ascnet.model import NetworkSpec

torch.set_num_threads(1)


@pytest.fixture
def tiny_spec():
    # narrow but structurally complete network for fast tests
    return NetworkSpec((32, 32), (4, 8, 16, 32), 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    def record(k: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[k] = f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[k])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
