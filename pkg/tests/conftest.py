from __future__ import annotations

import pytest

from bohmchsh import spin_analytic as sa
from bohmchsh.field_engine import GridSpec, PhysParams, init_state

# Reduced grid for unit tests: same dy = sigma0/4 resolution as the default, smaller box.
SMALL_GRID = GridSpec(256, 32.0)
SMALL_PHYS = PhysParams(substeps=16)


@pytest.fixture(scope="session")
def small_grid():
    return SMALL_GRID


@pytest.fixture(scope="session")
def small_phys():
    return SMALL_PHYS


@pytest.fixture(scope="session")
def singlet_field():
    return init_state(SMALL_GRID, SMALL_PHYS, sa.singlet())


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
