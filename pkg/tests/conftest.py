import numpy as np
import pytest

from lidia.network import ArchDescriptor

SHRUNKEN = ArchDescriptor(patch_side=3, k=3, feature_dim=8, window=5)
TINY = ArchDescriptor(patch_side=5, k=6, feature_dim=16, window=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def shrunken():
    return SHRUNKEN


@pytest.fixture
def tiny():
    return TINY


# one "[PASS]/[FAIL] criterion N: ..." line per acceptance criterion, echoed in the summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
