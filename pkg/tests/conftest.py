import numpy as np
import pytest

from pdmpclt.model import builtin_model

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def ou():
    return builtin_model("two-regime-ou")


@pytest.fixture(scope="session")
def contract():
    return builtin_model("contract-multijump")


@pytest.fixture
def record_acceptance():
    """Collects one verdict line per acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    # run the acceptance module last so its summary closes the report
    items.sort(key=lambda it: it.nodeid.startswith("tests/test_acceptance.py"))


def rng_np(seed=0):
    return np.random.default_rng(seed)
