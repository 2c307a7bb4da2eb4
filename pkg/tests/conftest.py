import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shiftwell.harness import build_dataset  # noqa: E402
from shiftwell.synth import generate  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def bundle():
    """Default synthetic cohort, master seed 0."""
    return generate(seed=0)


@pytest.fixture(scope="session")
def dataset(bundle):
    return build_dataset(bundle.features, bundle.labels, bundle.participants)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
