import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from superscope.model import make_toy_model, toy_corpus  # noqa: E402

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def planted():
    return make_toy_model(0, (1, 5, 9, 100.0))


@pytest.fixture(scope="session")
def unplanted():
    return make_toy_model(0)


@pytest.fixture(scope="session")
def corpus():
    return toy_corpus(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"criterion {key}: {ACCEPTANCE[key]}")
