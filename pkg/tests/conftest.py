"""Shared fixtures."""

import numpy as np
import pytest

from coattreg.tensor import clear_grad_mutations, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor precision."""
    with precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _no_leftover_mutations():
    yield
    clear_grad_mutations()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line for an acceptance criterion; shown in the terminal summary."""

    def report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
