import pytest

from jcl_lab import nn

ACCEPTANCE_LINES = []


@pytest.fixture
def small_arch():
    return nn.Architecture(in_dim=3, hidden=(5, 4), feat_dim=4, proj_dim=3, n_classes=3)


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number, name, passed, detail):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
