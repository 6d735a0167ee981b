import numpy as np
import pytest
import torch

from muleeg.data import synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cohort():
    """Six short synthetic subjects, shared by tests that only need plumbing."""
    return synth_generate(6, 24, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; returns the pass flag."""

    def record(number, title, passed, detail=""):
        ACCEPTANCE_LINES.append((number, f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}"
                                         + (f": {detail}" if detail else "")))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
