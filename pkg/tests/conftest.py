import numpy as np
import pytest
import torch

from dualkan.pipeline import deterministic_mode

deterministic_mode()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def cox_de_boor(x: float, i: int, k: int, t) -> float:
    """Scalar textbook recursion with right-closed last span."""
    if k == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        # the last nondegenerate span also owns the right endpoint
        last = max(j for j in range(len(t) - 1) if t[j] < t[j + 1])
        return 1.0 if (i == last and x == t[i + 1]) else 0.0
    left = 0.0 if t[i + k] == t[i] else (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(x, i, k - 1, t)
    right = 0.0 if t[i + k + 1] == t[i + 1] else \
        (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(x, i + 1, k - 1, t)
    return left + right


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
